//! Fully-connected networks for the t-link and n-link potentials, trained
//! with mini-batch SGD + momentum.
//!
//! The t-link network maps one patch to two class probabilities (softmax).
//! The n-link network encodes each patch of a pair through a shared stack,
//! concatenates both codes with the z-scored geodesic distance, and maps
//! through a logistic head; it is always evaluated in both input orders
//! and averaged, so the potential is exactly symmetric.
//!
//! Parameters live in one flat vector per stack (layer weights row-major,
//! then biases), which keeps SGD, momentum and finite-difference checks
//! simple. Batch gradients are accumulated over fixed-size index chunks
//! combined in order, so training is bit-reproducible for any thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::{Patch, PatchLibrary};
use crate::rng;

/// Rectifier hidden layers, linear output (heads applied by the callers).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    /// Per layer: weights (out x in, row-major), then biases (out).
    pub params: Vec<f64>,
}

/// Cached per-layer inputs and pre-activations from a forward pass.
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Input(format!("bad layer widths {widths:?}")));
        }
        let n = Self::param_count_for(&widths);
        Ok(Self {
            widths,
            params: vec![0.0; n],
        })
    }

    pub fn param_count_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Weights uniform in +-scale/sqrt(fan_in), biases zero. Draw order is
    /// fixed (layer by layer, row-major) for reproducibility.
    pub fn init_uniform(widths: Vec<usize>, scale: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut off = 0;
        for l in 0..net.n_layers() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let bound = scale / (fan_in as f64).sqrt();
            for i in 0..fan_out * fan_in {
                net.params[off + i] = rng.gen_range(-bound..bound);
            }
            off += fan_out * fan_in + fan_out;
        }
        Ok(net)
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for i in 0..l {
            off += self.widths[i + 1] * self.widths[i] + self.widths[i + 1];
        }
        (off, off + self.widths[l + 1] * self.widths[l])
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Forward pass returning the output logits and the cache needed for
    /// backprop.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut zs = Vec::with_capacity(n_layers);
        let mut a = x.to_vec();
        for l in 0..n_layers {
            let (w_off, b_off) = self.layer_offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut z = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                let mut acc = self.params[b_off + o];
                for (wi, ai) in row.iter().zip(a.iter()) {
                    acc += wi * ai;
                }
                z[o] = acc;
            }
            inputs.push(a);
            let out = if l + 1 < n_layers {
                z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
            } else {
                z.clone()
            };
            zs.push(z);
            a = out;
        }
        (a, MlpCache { inputs, zs })
    }

    pub fn forward_only(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }

    /// Backprop from the output-logit gradient. Accumulates (+=) parameter
    /// gradients into `acc` (same layout as `params`) and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, delta_out: &[f64], acc: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(acc.len(), self.params.len());
        let n_layers = self.n_layers();
        let mut delta = delta_out.to_vec();
        for l in (0..n_layers).rev() {
            let (w_off, b_off) = self.layer_offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let input = &cache.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                acc[b_off + o] += d;
                let row = &mut acc[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (slot, ai) in row.iter_mut().zip(input.iter()) {
                    *slot += d * ai;
                }
            }
            let mut dx = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (slot, wi) in dx.iter_mut().zip(row.iter()) {
                    *slot += d * wi;
                }
            }
            if l > 0 {
                let z_prev = &cache.zs[l - 1];
                for (slot, z) in dx.iter_mut().zip(z_prev.iter()) {
                    if *z <= 0.0 {
                        *slot = 0.0;
                    }
                }
            }
            delta = dx;
        }
        delta
    }
}

fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn ln_clamped(p: f64) -> f64 {
    p.max(1e-15).ln()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub rng_seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 40,
            momentum: 0.9,
            rng_seed: 0,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Input("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch (measured at the parameters each
    /// batch was computed with).
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TlinkArch {
    pub hidden: Vec<usize>,
}

impl Default for TlinkArch {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NlinkArch {
    pub encoder_hidden: Vec<usize>,
    pub encoder_out: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for NlinkArch {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            encoder_out: 32,
            head_hidden: vec![32],
        }
    }
}

/// Patch -> (p_background, p_scar) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TlinkNet {
    pub mlp: Mlp,
}

impl TlinkNet {
    fn check_input(&self, patch: &Patch) -> Result<()> {
        if patch.len() != self.mlp.input_dim() {
            return Err(Error::Dimension(format!(
                "patch has {} samples, network expects {}",
                patch.len(),
                self.mlp.input_dim()
            )));
        }
        Ok(())
    }

    /// Per-sample loss/gradient for cross-entropy over the softmax head.
    fn sample_grad(&self, x: &[f64], label: u8, acc: &mut [f64]) -> f64 {
        let (logits, cache) = self.mlp.forward(x);
        let p = softmax2(&logits);
        let target = [1.0 - label as f64, label as f64];
        let delta = [p[0] - target[0], p[1] - target[1]];
        self.mlp.backward(&cache, &delta, acc);
        -(target[0] * ln_clamped(p[0]) + target[1] * ln_clamped(p[1]))
    }
}

/// Symmetric (patch, patch, distance) -> similarity network with a shared
/// per-patch encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NlinkNet {
    pub encoder: Mlp,
    pub head: Mlp,
    /// z-score statistics of the training-set edge lengths
    pub dist_mean: f64,
    pub dist_std: f64,
}

impl NlinkNet {
    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.head.n_params()
    }

    fn zscore_dist(&self, d: f64) -> f64 {
        (d - self.dist_mean) / self.dist_std
    }

    fn check_input(&self, a: &Patch, b: &Patch) -> Result<()> {
        let dim = self.encoder.input_dim();
        if a.len() != dim || b.len() != dim {
            return Err(Error::Dimension(format!(
                "patch pair has {}/{} samples, encoder expects {dim}",
                a.len(),
                b.len()
            )));
        }
        Ok(())
    }

    /// Similarity as the average sigmoid over both input orders.
    fn forward_sym(&self, xa: &[f64], xb: &[f64], dz: f64) -> f64 {
        let ea = self.encoder.forward_only(xa);
        let eb = self.encoder.forward_only(xb);
        let s1 = sigmoid(self.head.forward_only(&concat_pair(&ea, &eb, dz))[0]);
        let s2 = sigmoid(self.head.forward_only(&concat_pair(&eb, &ea, dz))[0]);
        0.5 * (s1 + s2)
    }

    /// Per-sample binary cross-entropy loss/gradient through the
    /// symmetrized forward. `acc` holds encoder then head gradients.
    fn sample_grad(&self, xa: &[f64], xb: &[f64], dist: f64, target: f64, acc: &mut [f64]) -> f64 {
        let dz = self.zscore_dist(dist);
        let enc_len = self.encoder.n_params();
        let code = self.encoder.output_dim();

        let (ea, ca) = self.encoder.forward(xa);
        let (eb, cb) = self.encoder.forward(xb);
        let h1 = concat_pair(&ea, &eb, dz);
        let h2 = concat_pair(&eb, &ea, dz);
        let (z1v, c1) = self.head.forward(&h1);
        let (z2v, c2) = self.head.forward(&h2);
        let (s1, s2) = (sigmoid(z1v[0]), sigmoid(z2v[0]));
        let s = 0.5 * (s1 + s2);
        let loss = -(target * ln_clamped(s) + (1.0 - target) * ln_clamped(1.0 - s));

        let gs = (s - target) / (s * (1.0 - s)).max(1e-12);
        let dz1 = gs * 0.5 * s1 * (1.0 - s1);
        let dz2 = gs * 0.5 * s2 * (1.0 - s2);

        let (acc_enc, acc_head) = acc.split_at_mut(enc_len);
        let dh1 = self.head.backward(&c1, &[dz1], acc_head);
        let dh2 = self.head.backward(&c2, &[dz2], acc_head);
        let mut dea = vec![0.0; code];
        let mut deb = vec![0.0; code];
        for i in 0..code {
            dea[i] = dh1[i] + dh2[code + i];
            deb[i] = dh1[code + i] + dh2[i];
        }
        self.encoder.backward(&ca, &dea, acc_enc);
        self.encoder.backward(&cb, &deb, acc_enc);
        loss
    }
}

fn concat_pair(ea: &[f64], eb: &[f64], dz: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(ea.len() + eb.len() + 1);
    h.extend_from_slice(ea);
    h.extend_from_slice(eb);
    h.push(dz);
    h
}

/// (p_background, p_scar); the pair sums to 1.
pub fn predict_tlink(net: &TlinkNet, patch: &Patch) -> Result<(f64, f64)> {
    net.check_input(patch)?;
    let logits = net.mlp.forward_only(&patch.values);
    let p = softmax2(&logits);
    Ok((p[0], p[1]))
}

/// Similarity in (0,1); exactly symmetric in the two patches.
pub fn predict_nlink(net: &NlinkNet, a: &Patch, b: &Patch, distance_mm: f64) -> Result<f64> {
    net.check_input(a, b)?;
    Ok(net.forward_sym(&a.values, &b.values, net.zscore_dist(distance_mm)))
}

/// Trains the t-link classifier on the unary library.
pub fn train_tlink(
    unary: &[(Patch, u8)],
    arch: &TlinkArch,
    cfg: &TrainConfig,
) -> Result<(TlinkNet, TrainReport)> {
    cfg.validate()?;
    let first = unary
        .first()
        .ok_or_else(|| Error::Input("empty unary library".into()))?;
    let input_dim = first.0.len();
    if unary.iter().any(|(p, _)| p.len() != input_dim) {
        return Err(Error::Dimension(
            "inconsistent patch sizes in library".into(),
        ));
    }
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&arch.hidden);
    widths.push(2);
    let mut init_rng = rng::rng_from(rng::derive_seed(cfg.rng_seed, "tlink-init"));
    let mut net = TlinkNet {
        mlp: Mlp::init_uniform(widths, cfg.init_scale, &mut init_rng)?,
    };
    let report = sgd_train_tlink(&mut net, unary, cfg);
    Ok((net, report))
}

fn sgd_train_tlink(net: &mut TlinkNet, samples: &[(Patch, u8)], cfg: &TrainConfig) -> TrainReport {
    use rand::seq::SliceRandom;
    let n_params = net.mlp.n_params();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = rng::rng_from(rng::derive_seed(cfg.rng_seed, "tlink-shuffle"));
    let mut velocity = vec![0.0; n_params];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    const GRAD_CHUNK: usize = 8;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &TlinkNet = net;
            let (grad, batch_loss) = crate::par::chunked_fold(
                batch.len(),
                GRAD_CHUNK,
                |range| {
                    let mut acc = vec![0.0; n_params];
                    let mut loss = 0.0;
                    for i in range {
                        let (p, label) = &samples[batch[i]];
                        loss += snapshot.sample_grad(&p.values, *label, &mut acc);
                    }
                    (acc, loss)
                },
                |(mut a, la), (b, lb)| {
                    for (x, y) in a.iter_mut().zip(b.iter()) {
                        *x += y;
                    }
                    (a, la + lb)
                },
                (vec![0.0; n_params], 0.0),
            );
            let inv = 1.0 / batch.len() as f64;
            for (v, g) in velocity.iter_mut().zip(grad.iter()) {
                *v = cfg.momentum * *v - cfg.learning_rate * g * inv;
            }
            for (p, v) in net.mlp.params.iter_mut().zip(velocity.iter()) {
                *p += v;
            }
            loss_sum += batch_loss;
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
    }
    TrainReport { epoch_losses }
}

/// Trains the n-link similarity network on the pairwise library. The
/// distance feature is z-scored by the training-set edge statistics.
pub fn train_nlink(
    pairwise: &[(Patch, Patch, f64, f64)],
    arch: &NlinkArch,
    cfg: &TrainConfig,
) -> Result<(NlinkNet, TrainReport)> {
    cfg.validate()?;
    let first = pairwise
        .first()
        .ok_or_else(|| Error::Input("empty pairwise library".into()))?;
    let input_dim = first.0.len();
    if pairwise
        .iter()
        .any(|(a, b, _, _)| a.len() != input_dim || b.len() != input_dim)
    {
        return Err(Error::Dimension(
            "inconsistent patch sizes in library".into(),
        ));
    }

    let n = pairwise.len() as f64;
    let dist_mean = pairwise.iter().map(|(_, _, d, _)| d).sum::<f64>() / n;
    let dist_var = pairwise
        .iter()
        .map(|(_, _, d, _)| (d - dist_mean) * (d - dist_mean))
        .sum::<f64>()
        / n;
    let dist_std = dist_var.sqrt().max(1e-12);

    let mut enc_widths = vec![input_dim];
    enc_widths.extend_from_slice(&arch.encoder_hidden);
    enc_widths.push(arch.encoder_out);
    let mut head_widths = vec![2 * arch.encoder_out + 1];
    head_widths.extend_from_slice(&arch.head_hidden);
    head_widths.push(1);

    let mut init_rng = rng::rng_from(rng::derive_seed(cfg.rng_seed, "nlink-init"));
    let mut net = NlinkNet {
        encoder: Mlp::init_uniform(enc_widths, cfg.init_scale, &mut init_rng)?,
        head: Mlp::init_uniform(head_widths, cfg.init_scale, &mut init_rng)?,
        dist_mean,
        dist_std,
    };
    let report = sgd_train_nlink(&mut net, pairwise, cfg);
    Ok((net, report))
}

fn sgd_train_nlink(
    net: &mut NlinkNet,
    samples: &[(Patch, Patch, f64, f64)],
    cfg: &TrainConfig,
) -> TrainReport {
    use rand::seq::SliceRandom;
    let n_params = net.n_params();
    let enc_len = net.encoder.n_params();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = rng::rng_from(rng::derive_seed(cfg.rng_seed, "nlink-shuffle"));
    let mut velocity = vec![0.0; n_params];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    const GRAD_CHUNK: usize = 8;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &NlinkNet = net;
            let (grad, batch_loss) = crate::par::chunked_fold(
                batch.len(),
                GRAD_CHUNK,
                |range| {
                    let mut acc = vec![0.0; n_params];
                    let mut loss = 0.0;
                    for i in range {
                        let (a, b, d, t) = &samples[batch[i]];
                        loss += snapshot.sample_grad(&a.values, &b.values, *d, *t, &mut acc);
                    }
                    (acc, loss)
                },
                |(mut a, la), (b, lb)| {
                    for (x, y) in a.iter_mut().zip(b.iter()) {
                        *x += y;
                    }
                    (a, la + lb)
                },
                (vec![0.0; n_params], 0.0),
            );
            let inv = 1.0 / batch.len() as f64;
            for (v, g) in velocity.iter_mut().zip(grad.iter()) {
                *v = cfg.momentum * *v - cfg.learning_rate * g * inv;
            }
            for (p, v) in net.encoder.params.iter_mut().zip(velocity[..enc_len].iter()) {
                *p += v;
            }
            for (p, v) in net.head.params.iter_mut().zip(velocity[enc_len..].iter()) {
                *p += v;
            }
            loss_sum += batch_loss;
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
    }
    TrainReport { epoch_losses }
}

/// Convenience: train both networks from one library.
pub fn train_potentials(
    library: &PatchLibrary,
    tlink_arch: &TlinkArch,
    nlink_arch: &NlinkArch,
    tlink_cfg: &TrainConfig,
    nlink_cfg: &TrainConfig,
) -> Result<(TlinkNet, TrainReport, NlinkNet, TrainReport)> {
    let (tnet, treport) = train_tlink(&library.unary, tlink_arch, tlink_cfg)?;
    let (nnet, nreport) = train_nlink(&library.pairwise, nlink_arch, nlink_cfg)?;
    Ok((tnet, treport, nnet, nreport))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    widths: Vec<Vec<usize>>,
    dist_mean: Option<f64>,
    dist_std: Option<f64>,
}

fn write_model(path: &std::path::Path, header: &ModelHeader, stacks: &[&Mlp]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header).expect("header serializes");
    bytes.push(b'\n');
    for mlp in stacks {
        for &p in &mlp.params {
            bytes.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_model(path: &std::path::Path) -> Result<(ModelHeader, Vec<Vec<f64>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path.display().to_string(), "missing header line"))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let counts: Vec<usize> = header
        .widths
        .iter()
        .map(|w| Mlp::param_count_for(w))
        .collect();
    let total: usize = counts.iter().sum();
    if payload.len() != total * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                total * 4
            ),
        ));
    }
    let mut all = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let stacks = counts
        .iter()
        .map(|&c| all.by_ref().take(c).collect())
        .collect();
    Ok((header, stacks))
}

pub fn save_tlink(net: &TlinkNet, path: impl AsRef<std::path::Path>) -> Result<()> {
    let header = ModelHeader {
        kind: "tlink".into(),
        widths: vec![net.mlp.widths.clone()],
        dist_mean: None,
        dist_std: None,
    };
    write_model(path.as_ref(), &header, &[&net.mlp])
}

pub fn load_tlink(path: impl AsRef<std::path::Path>) -> Result<TlinkNet> {
    let path = path.as_ref();
    let (header, mut stacks) = read_model(path)?;
    if header.kind != "tlink" || stacks.len() != 1 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected a tlink model, found '{}'", header.kind),
        ));
    }
    let mut mlp = Mlp::zeros(header.widths[0].clone())?;
    mlp.params = stacks.pop().unwrap();
    Ok(TlinkNet { mlp })
}

pub fn save_nlink(net: &NlinkNet, path: impl AsRef<std::path::Path>) -> Result<()> {
    let header = ModelHeader {
        kind: "nlink".into(),
        widths: vec![net.encoder.widths.clone(), net.head.widths.clone()],
        dist_mean: Some(net.dist_mean),
        dist_std: Some(net.dist_std),
    };
    write_model(path.as_ref(), &header, &[&net.encoder, &net.head])
}

pub fn load_nlink(path: impl AsRef<std::path::Path>) -> Result<NlinkNet> {
    let path = path.as_ref();
    let (header, mut stacks) = read_model(path)?;
    if header.kind != "nlink" || stacks.len() != 2 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected an nlink model, found '{}'", header.kind),
        ));
    }
    let head_params = stacks.pop().unwrap();
    let enc_params = stacks.pop().unwrap();
    let mut encoder = Mlp::zeros(header.widths[0].clone())?;
    encoder.params = enc_params;
    let mut head = Mlp::zeros(header.widths[1].clone())?;
    head.params = head_params;
    Ok(NlinkNet {
        encoder,
        head,
        dist_mean: header.dist_mean.unwrap_or(0.0),
        dist_std: header.dist_std.unwrap_or(1.0).max(1e-12),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn patch_from(values: Vec<f64>) -> Patch {
        Patch {
            size: [values.len(), 1, 1],
            step_mm: [1.0; 3],
            values,
            vertex: 0,
            normal_shift_mm: 0.0,
        }
    }

    /// Mean t-link loss over a batch, for finite-difference checks.
    pub fn tlink_batch_loss(net: &TlinkNet, batch: &[(Vec<f64>, u8)]) -> f64 {
        let mut scratch = vec![0.0; net.mlp.n_params()];
        let total: f64 = batch
            .iter()
            .map(|(x, l)| net.sample_grad(x, *l, &mut scratch))
            .sum();
        total / batch.len() as f64
    }

    pub fn tlink_batch_grad(net: &TlinkNet, batch: &[(Vec<f64>, u8)]) -> Vec<f64> {
        let mut acc = vec![0.0; net.mlp.n_params()];
        for (x, l) in batch {
            net.sample_grad(x, *l, &mut acc);
        }
        for g in acc.iter_mut() {
            *g /= batch.len() as f64;
        }
        acc
    }

    pub fn nlink_batch_loss(net: &NlinkNet, batch: &[(Vec<f64>, Vec<f64>, f64, f64)]) -> f64 {
        let mut scratch = vec![0.0; net.n_params()];
        let total: f64 = batch
            .iter()
            .map(|(a, b, d, t)| net.sample_grad(a, b, *d, *t, &mut scratch))
            .sum();
        total / batch.len() as f64
    }

    pub fn nlink_batch_grad(net: &NlinkNet, batch: &[(Vec<f64>, Vec<f64>, f64, f64)]) -> Vec<f64> {
        let mut acc = vec![0.0; net.n_params()];
        for (a, b, d, t) in batch {
            net.sample_grad(a, b, *d, *t, &mut acc);
        }
        for g in acc.iter_mut() {
            *g /= batch.len() as f64;
        }
        acc
    }

    pub fn get_nlink_param(net: &NlinkNet, i: usize) -> f64 {
        let enc = net.encoder.n_params();
        if i < enc {
            net.encoder.params[i]
        } else {
            net.head.params[i - enc]
        }
    }

    pub fn set_nlink_param(net: &mut NlinkNet, i: usize, v: f64) {
        let enc = net.encoder.n_params();
        if i < enc {
            net.encoder.params[i] = v;
        } else {
            net.head.params[i - enc] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn zero_net_softmax_is_half_half() {
        let net = TlinkNet {
            mlp: Mlp::zeros(vec![4, 3, 2]).unwrap(),
        };
        let p = predict_tlink(&net, &patch_from(vec![0.3, -0.1, 2.0, 0.7])).unwrap();
        assert_eq!(p, (0.5, 0.5));
    }

    #[test]
    fn zero_net_logistic_is_half() {
        let net = NlinkNet {
            encoder: Mlp::zeros(vec![3, 2]).unwrap(),
            head: Mlp::zeros(vec![5, 1]).unwrap(),
            dist_mean: 0.0,
            dist_std: 1.0,
        };
        let a = patch_from(vec![1.0, 2.0, 3.0]);
        let b = patch_from(vec![-1.0, 0.0, 1.0]);
        assert_eq!(predict_nlink(&net, &a, &b, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn rectifier_zeroes_negative_components() {
        // single hidden layer with identity weights
        let mut mlp = Mlp::zeros(vec![2, 2, 2]).unwrap();
        mlp.params[0] = 1.0; // w0[0][0]
        mlp.params[3] = 1.0; // w0[1][1]
        let (_, cache) = mlp.forward(&[-1.0, 2.0]);
        assert_eq!(cache.inputs[1], vec![0.0, 2.0]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut r = rng::rng_from(3);
        let net = TlinkNet {
            mlp: Mlp::init_uniform(vec![6, 5, 2], 1.0, &mut r).unwrap(),
        };
        let p = predict_tlink(&net, &patch_from(vec![0.5; 6])).unwrap();
        assert!((p.0 + p.1 - 1.0).abs() <= 1e-12);
        assert!(p.0 > 0.0 && p.1 > 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = TlinkNet {
            mlp: Mlp::zeros(vec![4, 2]).unwrap(),
        };
        assert!(predict_tlink(&net, &patch_from(vec![1.0; 5])).is_err());
    }

    fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng;
        let mut r = rng::rng_from(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn fd_check_tlink(seed: u64) -> f64 {
        use rand::Rng;
        let mut r = rng::rng_from(seed);
        let mut net = TlinkNet {
            mlp: Mlp::init_uniform(vec![5, 4, 3, 2], 1.0, &mut r).unwrap(),
        };
        let batch: Vec<(Vec<f64>, u8)> = random_inputs(6, 5, seed ^ 1)
            .into_iter()
            .map(|x| {
                let l = r.gen_range(0..2u8);
                (x, l)
            })
            .collect();
        let analytic = tlink_batch_grad(&net, &batch);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.mlp.n_params() {
            let orig = net.mlp.params[i];
            net.mlp.params[i] = orig + h;
            let lp = tlink_batch_loss(&net, &batch);
            net.mlp.params[i] = orig - h;
            let lm = tlink_batch_loss(&net, &batch);
            net.mlp.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    fn fd_check_nlink(seed: u64) -> f64 {
        use rand::Rng;
        let mut r = rng::rng_from(seed);
        let mut net = NlinkNet {
            encoder: Mlp::init_uniform(vec![4, 4, 3], 1.0, &mut r).unwrap(),
            head: Mlp::init_uniform(vec![7, 4, 1], 1.0, &mut r).unwrap(),
            dist_mean: 1.0,
            dist_std: 0.5,
        };
        let xs = random_inputs(10, 4, seed ^ 2);
        let batch: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = xs
            .chunks(2)
            .map(|pair| {
                let d = r.gen_range(0.5..2.0);
                let t = if r.gen_bool(0.5) { 1.0 } else { 0.0 };
                (pair[0].clone(), pair[1].clone(), d, t)
            })
            .collect();
        let analytic = nlink_batch_grad(&net, &batch);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.n_params() {
            let orig = get_nlink_param(&net, i);
            set_nlink_param(&mut net, i, orig + h);
            let lp = nlink_batch_loss(&net, &batch);
            set_nlink_param(&mut net, i, orig - h);
            let lm = nlink_batch_loss(&net, &batch);
            set_nlink_param(&mut net, i, orig);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [11u64, 12, 13] {
            let w = fd_check_tlink(seed);
            assert!(w <= 1e-4, "tlink worst rel err {w} at seed {seed}");
            let w = fd_check_nlink(seed);
            assert!(w <= 1e-4, "nlink worst rel err {w} at seed {seed}");
        }
    }

    #[test]
    fn saturated_correct_batch_has_tiny_gradient() {
        // big logit gap, correct labels -> near-stationary
        let mut net = TlinkNet {
            mlp: Mlp::zeros(vec![2, 2]).unwrap(),
        };
        net.mlp.params[0] = 20.0; // class-0 logit reads x0
        net.mlp.params[3] = 20.0; // class-1 logit reads x1
        let batch = vec![(vec![1.0, 0.0], 0u8), (vec![0.0, 1.0], 1u8)];
        let loss = tlink_batch_loss(&net, &batch);
        let grad = tlink_batch_grad(&net, &batch);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        // negligible against the chance-level loss scale (ln 2)
        let loss_scale = std::f64::consts::LN_2;
        assert!(norm <= loss_scale * 1e-3, "norm {norm} loss {loss}");
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let mut r = rng::rng_from(77);
        let net = TlinkNet {
            mlp: Mlp::init_uniform(vec![3, 4, 2], 1.0, &mut r).unwrap(),
        };
        let single = vec![(vec![0.2, -0.4, 0.9], 1u8)];
        let doubled = vec![single[0].clone(), single[0].clone()];
        let g1 = tlink_batch_grad(&net, &single);
        let g2 = tlink_batch_grad(&net, &doubled);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    fn separable_unary(n: usize, dim: usize, seed: u64) -> Vec<(Patch, u8)> {
        use rand::Rng;
        let mut r = rng::rng_from(seed);
        (0..n)
            .map(|_| {
                let label = r.gen_range(0..2u8);
                let shift = if label == 1 { 0.5 } else { -0.5 };
                let values: Vec<f64> = (0..dim).map(|_| shift + r.gen_range(-0.3..0.3)).collect();
                (patch_from(values), label)
            })
            .collect()
    }

    #[test]
    fn separable_unary_set_trains_to_high_accuracy() {
        let samples = separable_unary(200, 12, 5);
        let cfg = TrainConfig {
            epochs: 50,
            rng_seed: 5,
            ..TrainConfig::default()
        };
        let arch = TlinkArch { hidden: vec![16, 8] };
        let (net, report) = train_tlink(&samples, &arch, &cfg).unwrap();
        let correct = samples
            .iter()
            .filter(|(p, l)| {
                let (p0, p1) = predict_tlink(&net, p).unwrap();
                (p1 > p0) == (*l == 1)
            })
            .count();
        let acc = correct as f64 / samples.len() as f64;
        assert!(
            acc >= 0.98,
            "accuracy {acc}, final loss {}",
            report.final_loss()
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let samples = separable_unary(64, 6, 9);
        let cfg = TrainConfig {
            epochs: 5,
            rng_seed: 123,
            ..TrainConfig::default()
        };
        let arch = TlinkArch { hidden: vec![8] };
        let (a, _) = train_tlink(&samples, &arch, &cfg).unwrap();
        let (b, _) = train_tlink(&samples, &arch, &cfg).unwrap();
        assert_eq!(a.mlp.params, b.mlp.params);
    }

    fn sign_pair_set(n: usize, dim: usize, seed: u64) -> Vec<(Patch, Patch, f64, f64)> {
        use rand::Rng;
        let mut r = rng::rng_from(seed);
        (0..n)
            .map(|_| {
                let sa = if r.gen_bool(0.5) { 0.5 } else { -0.5 };
                let sb = if r.gen_bool(0.5) { 0.5 } else { -0.5 };
                let mut mk = |s: f64| {
                    let vals: Vec<f64> = (0..dim).map(|_| s + r.gen_range(-0.25..0.25)).collect();
                    patch_from(vals)
                };
                let a = mk(sa);
                let b = mk(sb);
                let d = r.gen_range(0.5..2.0);
                let t = if sa == sb { 1.0 } else { 0.0 };
                (a, b, d, t)
            })
            .collect()
    }

    #[test]
    fn pairwise_sign_task_generalizes() {
        let train = sign_pair_set(400, 8, 21);
        let held_out = sign_pair_set(200, 8, 22);
        let cfg = TrainConfig {
            epochs: 60,
            rng_seed: 21,
            ..TrainConfig::default()
        };
        let arch = NlinkArch {
            encoder_hidden: vec![12],
            encoder_out: 6,
            head_hidden: vec![8],
        };
        let (net, _) = train_nlink(&train, &arch, &cfg).unwrap();
        let correct = held_out
            .iter()
            .filter(|(a, b, d, t)| {
                let s = predict_nlink(&net, a, b, *d).unwrap();
                (s > 0.5) == (*t == 1.0)
            })
            .count();
        let acc = correct as f64 / held_out.len() as f64;
        assert!(acc >= 0.95, "held-out accuracy {acc}");

        // identical patches at zero distance look alike
        let p = patch_from(vec![0.5; 8]);
        let s = predict_nlink(&net, &p, &p, 0.0).unwrap();
        assert!(s > 0.5, "similarity of identical patches {s}");
    }

    #[test]
    fn similarity_is_exactly_symmetric() {
        let mut r = rng::rng_from(31);
        let net = NlinkNet {
            encoder: Mlp::init_uniform(vec![5, 4, 3], 1.0, &mut r).unwrap(),
            head: Mlp::init_uniform(vec![7, 4, 1], 1.0, &mut r).unwrap(),
            dist_mean: 1.0,
            dist_std: 0.7,
        };
        let a = patch_from(vec![0.1, 0.4, -0.7, 0.2, 0.9]);
        let b = patch_from(vec![-0.3, 0.8, 0.5, -0.1, 0.0]);
        let s1 = predict_nlink(&net, &a, &b, 1.3).unwrap();
        let s2 = predict_nlink(&net, &b, &a, 1.3).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn convex_logistic_loss_non_increasing_with_halved_lr() {
        // 1-layer logistic head on a linearly separable pair task: full-batch
        // descent without momentum must not increase the loss at a stable
        // lr, nor when the lr is halved.
        let train = sign_pair_set(128, 4, 55);
        let arch = NlinkArch {
            encoder_hidden: vec![],
            encoder_out: 4,
            head_hidden: vec![],
        };
        for lr in [0.05, 0.025] {
            let cfg = TrainConfig {
                learning_rate: lr,
                momentum: 0.0,
                batch_size: 128,
                epochs: 30,
                rng_seed: 55,
                init_scale: 0.1,
            };
            let (_, report) = train_nlink(&train, &arch, &cfg).unwrap();
            for w in report.epoch_losses.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "loss increased {} -> {} at lr {lr}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn model_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = separable_unary(32, 4, 71);
        let cfg = TrainConfig {
            epochs: 2,
            rng_seed: 71,
            ..TrainConfig::default()
        };
        let (tnet, _) = train_tlink(&samples, &TlinkArch { hidden: vec![6] }, &cfg).unwrap();
        let tpath = dir.path().join("t.bin");
        save_tlink(&tnet, &tpath).unwrap();
        let tback = load_tlink(&tpath).unwrap();
        assert_eq!(tback.mlp.widths, tnet.mlp.widths);
        for (a, b) in tnet.mlp.params.iter().zip(tback.mlp.params.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }

        let pairs = sign_pair_set(32, 4, 72);
        let (nnet, _) = train_nlink(
            &pairs,
            &NlinkArch {
                encoder_hidden: vec![5],
                encoder_out: 3,
                head_hidden: vec![4],
            },
            &cfg,
        )
        .unwrap();
        let npath = dir.path().join("n.bin");
        save_nlink(&nnet, &npath).unwrap();
        let nback = load_nlink(&npath).unwrap();
        assert_eq!(nback.encoder.widths, nnet.encoder.widths);
        assert_eq!(nback.head.widths, nnet.head.widths);
        assert_eq!(nback.dist_mean, nnet.dist_mean);
    }
}
