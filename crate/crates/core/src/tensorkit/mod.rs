//! Minimal training toolkit: a define-by-run graph with reverse-mode
//! gradients, a named parameter store, Adam, and finite-difference checking.

mod graph;

pub use graph::{Graph, TensorId, NORM_EPS};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

/// Round to the nearest f32-representable value. Parameters and optimizer
/// state are kept on this grid so 32-bit checkpoints round-trip bit-exactly.
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Adam first/second moments; empty until the first step.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Running statistics and the like are stored as non-trainable params.
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameters with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    pub params: BTreeMap<String, Param>,
    /// Completed Adam steps.
    pub step: u64,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                values,
                m: Vec::new(),
                v: Vec::new(),
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        self.insert(name, shape, values);
        self.params.get_mut(name).unwrap().trainable = false;
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("unknown parameter '{name}'")))
    }

    /// Bind a parameter into a graph as a leaf, recording the binding so the
    /// trainer can collect its gradient after backward.
    pub fn bind(&self, graph: &mut Graph, name: &str) -> Result<TensorId> {
        let p = self.get(name)?;
        let id = graph.leaf(&p.shape, p.values.clone(), p.trainable);
        graph.bindings.push((name.to_string(), id));
        Ok(id)
    }

    pub fn total_parameters(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    // ---- initializers -------------------------------------------------

    /// Xavier/Glorot uniform init on the f32 grid.
    pub fn init_xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha12Rng,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| to_f32_grid(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, shape, values);
    }

    /// Affine layer weights plus zero bias.
    pub fn init_linear(
        &mut self,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha12Rng,
    ) {
        self.init_xavier(&format!("{prefix}.w"), &[d_in, d_out], d_in, d_out, rng);
        self.insert(&format!("{prefix}.b"), &[d_out], vec![0.0; d_out]);
    }

    /// Conv2d weights (Co,Ci,kh,kw) plus zero bias.
    pub fn init_conv2d(
        &mut self,
        prefix: &str,
        co: usize,
        ci: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha12Rng,
    ) {
        self.init_xavier(
            &format!("{prefix}.w"),
            &[co, ci, kh, kw],
            ci * kh * kw,
            co * kh * kw,
            rng,
        );
        self.insert(&format!("{prefix}.b"), &[co], vec![0.0; co]);
    }

    /// Conv1d weights (Co,Ci,k) plus zero bias.
    pub fn init_conv1d(
        &mut self,
        prefix: &str,
        co: usize,
        ci: usize,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) {
        self.init_xavier(&format!("{prefix}.w"), &[co, ci, k], ci * k, co * k, rng);
        self.insert(&format!("{prefix}.b"), &[co], vec![0.0; co]);
    }

    /// ConvTranspose2d weights (Ci,Co,kh,kw) plus zero bias.
    pub fn init_conv_transpose2d(
        &mut self,
        prefix: &str,
        ci: usize,
        co: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha12Rng,
    ) {
        self.init_xavier(
            &format!("{prefix}.w"),
            &[ci, co, kh, kw],
            ci * kh * kw,
            co * kh * kw,
            rng,
        );
        self.insert(&format!("{prefix}.b"), &[co], vec![0.0; co]);
    }

    /// Normalization affine: unit gamma, zero beta.
    pub fn init_norm(&mut self, prefix: &str, c: usize) {
        self.insert(&format!("{prefix}.gamma"), &[c], vec![1.0; c]);
        self.insert(&format!("{prefix}.beta"), &[c], vec![0.0; c]);
    }

    /// Batch-norm affine plus running mean/var buffers.
    pub fn init_batch_norm(&mut self, prefix: &str, c: usize) {
        self.init_norm(prefix, c);
        self.insert_buffer(&format!("{prefix}.running_mean"), &[c], vec![0.0; c]);
        self.insert_buffer(&format!("{prefix}.running_var"), &[c], vec![1.0; c]);
    }

    /// Fold batch statistics from a training forward into the running
    /// buffers with momentum `mom` (new = (1-mom)*old + mom*batch).
    pub fn update_running_stats(
        &mut self,
        prefix: &str,
        batch_mean: &[f64],
        batch_var: &[f64],
        mom: f64,
    ) -> Result<()> {
        for (suffix, batch) in [("running_mean", batch_mean), ("running_var", batch_var)] {
            let p = self.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, b) in p.values.iter_mut().zip(batch) {
                *r = to_f32_grid((1.0 - mom) * *r + mom * b);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One Adam update over every trainable parameter that has a gradient entry.
/// Updated values and moments are rounded to the f32 grid.
pub fn adam_step(
    ps: &mut ParameterSet,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::config("adam learning rate must be positive"));
    }
    let t = (ps.step + 1) as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, g) in grads {
        let p = ps.get_mut(name)?;
        if !p.trainable {
            continue;
        }
        if g.len() != p.values.len() {
            return Err(Error::dimension(format!(
                "gradient size {} != parameter size {} for '{name}'",
                g.len(),
                p.values.len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for '{name}'")));
        }
        if p.m.is_empty() {
            p.m = vec![0.0; g.len()];
            p.v = vec![0.0; g.len()];
        }
        for i in 0..g.len() {
            p.m[i] = to_f32_grid(cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i]);
            p.v[i] = to_f32_grid(cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
            let mhat = p.m[i] / bc1;
            let vhat = p.v[i] / bc2;
            let step = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.values[i];
            p.values[i] = to_f32_grid(p.values[i] - cfg.lr * step);
        }
    }
    ps.step += 1;
    Ok(())
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of a scalar-valued builder over every trainable parameter.
pub fn grad_check<F>(ps: &mut ParameterSet, build: F) -> Result<f64>
where
    F: Fn(&ParameterSet, &mut Graph) -> Result<TensorId>,
{
    let eps = 1e-5;
    let mut g = Graph::new();
    let loss = build(ps, &mut g)?;
    g.backward(loss);
    let analytic = g.collect_grads();
    let names: Vec<String> = ps
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = ps.get(&name)?.numel();
        for i in 0..n {
            let orig = ps.get(&name)?.values[i];
            ps.get_mut(&name)?.values[i] = orig + eps;
            let mut gp = Graph::new();
            let lp = build(ps, &mut gp)?;
            let fp = gp.scalar_value(lp);
            ps.get_mut(&name)?.values[i] = orig - eps;
            let mut gm = Graph::new();
            let lm = build(ps, &mut gm)?;
            let fm = gm.scalar_value(lm);
            ps.get_mut(&name)?.values[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let ad = analytic.get(&name).map_or(0.0, |gr| gr[i]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Convenience: mean-squared-error node between prediction and target.
pub fn mse_loss(g: &mut Graph, pred: TensorId, target: TensorId) -> TensorId {
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}
