//! Split federated training protocol.
//!
//! A reference model is cut at a layer boundary into a client-side bottom and
//! a server-side top. Per round, every client pushes its local batches through
//! `client_forward` -> `server_step` -> `client_backward` with SGD steps on
//! both sides; the server then applies the watermark regularizer step, and the
//! round closes with a weighted average over client bottoms.
//!
//! Clients are served in fixed round-robin order by default (bitwise
//! deterministic). The optional parallel mode runs clients on threads with
//! every top-model update serialized through one channel; arrival order is
//! scheduler-dependent there.

use crate::binfmt::{Reader, Writer};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::loss::{accuracy, softmax_cross_entropy};
use crate::model::Model;
use crate::seed::{self, tag};
use crate::tensor::Tensor;
use crate::watermark::FeatureWatermark;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const MAGIC: &[u8; 4] = b"SMK1";
const VERSION: u16 = 1;
const TAG_FORWARD: u8 = 1;
const TAG_BACKWARD: u8 = 2;

/// Bottom/top halves of a reference model, cut at `split_index` (the number
/// of primitive layers held by the bottom).
#[derive(Debug, Clone)]
pub struct SplitModelPair {
    pub bottom: Model,
    pub top: Model,
    pub split_index: usize,
}

impl SplitModelPair {
    /// Cuts a monolithic model at the given primitive layer index.
    pub fn split(monolithic: Model, split_index: usize) -> Result<Self> {
        let n = monolithic.layers().len();
        if split_index == 0 || split_index >= n {
            return Err(Error::Config(format!(
                "split index must fall strictly inside 1..{n}, got {split_index}"
            )));
        }
        let input_shape = monolithic.input_shape().to_vec();
        let mut shape = input_shape.clone();
        for layer in &monolithic.layers()[..split_index] {
            shape = layer.out_shape(&shape)?;
        }
        let mut layers = monolithic.into_layers();
        let top_layers = layers.split_off(split_index);
        let mut bottom = Model::new(input_shape, layers)?;
        let mut top = Model::new(shape, top_layers)?;
        bottom.clear_caches();
        top.clear_caches();
        Ok(SplitModelPair {
            bottom,
            top,
            split_index,
        })
    }

    /// Reconstructs the monolithic model by concatenating the halves.
    pub fn to_monolithic(&self) -> Result<Model> {
        let mut layers = self.bottom.layers().to_vec();
        layers.extend_from_slice(self.top.layers());
        let mut m = Model::new(self.bottom.input_shape().to_vec(), layers)?;
        m.clear_caches();
        m.zero_grads();
        Ok(m)
    }

    /// Eval-mode prediction through both halves; read-only.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.top.infer(&self.bottom.infer(batch)?)
    }

    /// Eval accuracy over a whole dataset.
    pub fn accuracy_on(&self, ds: &LabeledDataset) -> Result<f64> {
        let all: Vec<usize> = (0..ds.len()).collect();
        let (x, y) = ds.batch(&all);
        let logits = self.infer(&x)?;
        Ok(accuracy(&logits, &y))
    }
}

/// Smashed data and labels travelling client -> server.
#[derive(Debug, Clone)]
pub struct ForwardMsg {
    pub client_id: u32,
    pub round: u32,
    pub activations: Tensor,
    pub labels: Vec<usize>,
}

impl ForwardMsg {
    pub fn new(client_id: u32, round: u32, activations: Tensor, labels: Vec<usize>) -> Result<Self> {
        if activations.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "activation batch {} != label count {}",
                activations.shape()[0],
                labels.len()
            )));
        }
        Ok(ForwardMsg {
            client_id,
            round,
            activations,
            labels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(VERSION);
        w.u8(TAG_FORWARD);
        w.u32(self.client_id);
        w.u32(self.round);
        write_tensor(&mut w, &self.activations);
        w.u32(self.labels.len() as u32);
        for &l in &self.labels {
            w.u16(l as u16);
        }
        w.finish(MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "forward message")?;
        if r.u8()? != TAG_FORWARD {
            return Err(Error::Format("not a forward message".into()));
        }
        let client_id = r.u32()?;
        let round = r.u32()?;
        let activations = read_tensor(&mut r)?;
        let n = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u16()? as usize);
        }
        r.expect_end()?;
        ForwardMsg::new(client_id, round, activations, labels)
    }
}

/// Split-layer gradient and loss travelling server -> client.
#[derive(Debug, Clone)]
pub struct BackwardMsg {
    pub client_id: u32,
    pub round: u32,
    pub split_grad: Tensor,
    pub loss_value: f64,
}

impl BackwardMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(VERSION);
        w.u8(TAG_BACKWARD);
        w.u32(self.client_id);
        w.u32(self.round);
        write_tensor(&mut w, &self.split_grad);
        w.f32(self.loss_value as f32);
        w.finish(MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "backward message")?;
        if r.u8()? != TAG_BACKWARD {
            return Err(Error::Format("not a backward message".into()));
        }
        let client_id = r.u32()?;
        let round = r.u32()?;
        let split_grad = read_tensor(&mut r)?;
        let loss_value = r.f32()? as f64;
        r.expect_end()?;
        Ok(BackwardMsg {
            client_id,
            round,
            split_grad,
            loss_value,
        })
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u8(t.shape().len() as u8);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32_slice(t.data());
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n = dims.iter().product();
    Tensor::new(dims, r.f32_vec(n)?)
}

/// Elementwise clipping bound and noise scale for smashed-data privacy.
#[derive(Debug, Clone, Copy)]
pub struct DpParams {
    pub sigma: f64,
    pub clip: f64,
}

/// Training hyperparameters for one protocol run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub clients: usize,
    pub rounds: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// Strength of the server watermark regularizer.
    pub alpha: f64,
    /// Apply the server-side feature watermark.
    pub feature_wm: bool,
    /// Poisoning rate used when client datasets were prepared.
    pub rho: f64,
    pub dp_sigma: f64,
    pub dp_clip: f64,
    pub seed: u64,
    /// Apply the watermark step once per round instead of once per client
    /// service.
    pub wm_per_round_only: bool,
    /// Serve clients on threads; top-model updates stay serialized but their
    /// order becomes scheduler-dependent.
    pub parallel: bool,
    /// Clients that skip local training and contribute the unchanged global
    /// bottom to aggregation (passive free-riders).
    pub passive_clients: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.dp_sigma < 0.0 {
            return Err(Error::Config("dp sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0,1], got {}", self.rho)));
        }
        if let Some(&bad) = self.passive_clients.iter().find(|&&k| k >= self.clients) {
            return Err(Error::Config(format!(
                "passive client {bad} out of range (clients={})",
                self.clients
            )));
        }
        Ok(())
    }

    fn dp(&self) -> Option<DpParams> {
        (self.dp_sigma > 0.0).then_some(DpParams {
            sigma: self.dp_sigma,
            clip: self.dp_clip,
        })
    }
}

/// Per-round training record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Mean main-task loss per client.
    pub client_loss: Vec<f64>,
    /// Server watermark loss after the round's last watermark step.
    pub wm_loss: f64,
    pub eval_acc: Option<f64>,
    pub theta_f: Option<f64>,
}

/// Computes smashed data for a batch. With DP enabled the activations are
/// clipped elementwise to [-C, C] and perturbed with N(0, sigma^2) noise;
/// the returned mask records which coordinates survived clipping so the
/// client can gate the returned gradient.
pub fn client_forward<R: Rng>(
    bottom: &mut Model,
    batch: &Tensor,
    labels: &[usize],
    client_id: u32,
    round: u32,
    dp: Option<&DpParams>,
    noise_rng: &mut R,
) -> Result<(ForwardMsg, Option<Vec<bool>>)> {
    let mut z = bottom.forward(batch, Mode::Train)?;
    let mut pass_mask = None;
    if let Some(dp) = dp {
        let c = dp.clip.abs();
        let mut mask = vec![true; z.len()];
        for (v, m) in z.data_mut().iter_mut().zip(mask.iter_mut()) {
            if *v > c {
                *v = c;
                *m = false;
            } else if *v < -c {
                *v = -c;
                *m = false;
            }
        }
        for v in z.data_mut() {
            let noise: f64 = StandardNormal.sample(noise_rng);
            *v += dp.sigma * noise;
        }
        pass_mask = Some(mask);
    }
    Ok((ForwardMsg::new(client_id, round, z, labels.to_vec())?, pass_mask))
}

/// Runs the top model on a forward message: computes the cross-entropy loss,
/// accumulates top gradients, and returns the split-layer gradient.
pub fn server_step(top: &mut Model, msg: &ForwardMsg) -> Result<BackwardMsg> {
    let logits = top.forward(&msg.activations, Mode::Train)?;
    let (loss, upstream) = softmax_cross_entropy(&logits, &msg.labels)?;
    let split_grad = top.backward(&upstream)?;
    Ok(BackwardMsg {
        client_id: msg.client_id,
        round: msg.round,
        split_grad,
        loss_value: loss,
    })
}

/// Backpropagates the server's split-layer gradient through the client's
/// cached forward pass, accumulating bottom gradients. `clip_pass` gates
/// coordinates that were clipped before noising.
pub fn client_backward(
    bottom: &mut Model,
    msg: &BackwardMsg,
    clip_pass: Option<&[bool]>,
) -> Result<()> {
    let g = match clip_pass {
        None => msg.split_grad.clone(),
        Some(mask) => {
            if mask.len() != msg.split_grad.len() {
                return Err(Error::Shape("clip mask does not match gradient".into()));
            }
            let mut g = msg.split_grad.clone();
            for (v, &keep) in g.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
            g
        }
    };
    bottom.backward(&g)?;
    Ok(())
}

/// Weight-normalized convex combination of architecturally identical models,
/// covering every parameter and running statistic.
pub fn fedavg(models: &[Model], weights: &[f64]) -> Result<Model> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} models with {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Aggregation("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Aggregation("weights must not all be zero".into()));
    }
    let sig = models[0].arch_signature();
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.arch_signature() != sig {
            return Err(Error::Aggregation(format!(
                "model {i} differs architecturally from model 0"
            )));
        }
    }
    let mut out = models[0].clone();
    out.clear_caches();
    out.zero_grads();
    for t in out.layers_mut().iter_mut().flat_map(|l| l.state_mut()) {
        t.data_mut().fill(0.0);
    }
    for (m, &w) in models.iter().zip(weights) {
        let coeff = w / total;
        let mut acc_iter: Vec<&mut Tensor> = Vec::new();
        for l in out.layers_mut() {
            acc_iter.extend(l.state_mut());
        }
        let mut src_iter: Vec<&Tensor> = Vec::new();
        for l in m.layers() {
            src_iter.extend(l.state());
        }
        for (dst, src) in acc_iter.into_iter().zip(src_iter) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += coeff * s;
            }
        }
    }
    Ok(out)
}

fn batch_order(n: usize, seed_v: u64, round: u32, client: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed_v, &[tag::BATCH, round as u64, client as u64]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Serves one client for a round: all local batches through the protocol with
/// SGD steps on both sides. Returns the client's mean main-task loss.
fn serve_client(
    top: &mut Model,
    bottom: &mut Model,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    round: u32,
    k: usize,
) -> Result<f64> {
    let order = batch_order(ds.len(), cfg.seed, round, k);
    let dp = cfg.dp();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (bx, by) = ds.batch(chunk);
        let mut noise_rng = seed::rng(cfg.seed, &[tag::DP_NOISE, round as u64, k as u64, b as u64]);
        let (fmsg, clip) =
            client_forward(bottom, &bx, &by, k as u32, round, dp.as_ref(), &mut noise_rng)?;
        let bmsg = server_step(top, &fmsg)?;
        top.sgd_step(cfg.lr)?;
        client_backward(bottom, &bmsg, clip.as_deref())?;
        bottom.sgd_step(cfg.lr)?;
        loss_sum += bmsg.loss_value;
        batches += 1;
    }
    Ok(loss_sum / batches.max(1) as f64)
}

fn parallel_round(
    top: &mut Model,
    bottoms: &mut [Model],
    data: &[LabeledDataset],
    cfg: &TrainConfig,
    round: u32,
) -> Result<Vec<f64>> {
    use std::sync::mpsc;
    type Job = (ForwardMsg, mpsc::Sender<BackwardMsg>);
    let (tx, rx) = mpsc::channel::<Job>();
    let lr = cfg.lr;
    let dp = cfg.dp();
    std::thread::scope(|scope| -> Result<Vec<f64>> {
        let handles: Vec<_> = bottoms
            .iter_mut()
            .enumerate()
            .map(|(k, bottom)| {
                let tx = tx.clone();
                let ds = &data[k];
                scope.spawn(move || -> Result<f64> {
                    if cfg.passive_clients.contains(&k) {
                        return Ok(0.0);
                    }
                    let order = batch_order(ds.len(), cfg.seed, round, k);
                    let mut loss_sum = 0.0;
                    let mut batches = 0usize;
                    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                        let (bx, by) = ds.batch(chunk);
                        let mut noise_rng =
                            seed::rng(cfg.seed, &[tag::DP_NOISE, round as u64, k as u64, b as u64]);
                        let (fmsg, clip) = client_forward(
                            bottom,
                            &bx,
                            &by,
                            k as u32,
                            round,
                            dp.as_ref(),
                            &mut noise_rng,
                        )?;
                        let (btx, brx) = mpsc::channel();
                        tx.send((fmsg, btx))
                            .map_err(|_| Error::State("server hung up".into()))?;
                        let bmsg = brx
                            .recv()
                            .map_err(|_| Error::State("server dropped a reply".into()))?;
                        client_backward(bottom, &bmsg, clip.as_deref())?;
                        bottom.sgd_step(lr)?;
                        loss_sum += bmsg.loss_value;
                        batches += 1;
                    }
                    Ok(loss_sum / batches.max(1) as f64)
                })
            })
            .collect();
        drop(tx);

        // Single-writer loop: every top update flows through this queue.
        while let Ok((fmsg, reply)) = rx.recv() {
            let bmsg = server_step(top, &fmsg)?;
            top.sgd_step(lr)?;
            let _ = reply.send(bmsg);
        }

        let mut losses = Vec::with_capacity(handles.len());
        for h in handles {
            losses.push(h.join().map_err(|_| Error::State("client thread panicked".into()))??);
        }
        Ok(losses)
    })
}

/// Runs the full protocol: per round, distribute the global bottom, serve
/// every client, apply the server watermark step, and aggregate bottoms
/// weighted by local dataset size.
pub fn train(
    cfg: &TrainConfig,
    pair: SplitModelPair,
    data: &[LabeledDataset],
    fw: Option<&FeatureWatermark>,
    eval: Option<&LabeledDataset>,
) -> Result<(SplitModelPair, Vec<RoundRecord>)> {
    cfg.validate()?;
    if data.len() != cfg.clients {
        return Err(Error::Config(format!(
            "config declares {} clients but {} datasets were supplied",
            cfg.clients,
            data.len()
        )));
    }
    if data.iter().any(|d| d.is_empty()) {
        return Err(Error::Config("every client needs at least one sample".into()));
    }
    let wm_active = cfg.feature_wm && cfg.alpha > 0.0;
    if wm_active && fw.is_none() {
        return Err(Error::Config("feature watermark enabled but none supplied".into()));
    }

    let SplitModelPair {
        bottom: mut global_bottom,
        mut top,
        split_index,
    } = pair;
    let weights: Vec<f64> = data.iter().map(|d| d.len() as f64).collect();
    let mut history = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let mut bottoms: Vec<Model> = (0..cfg.clients).map(|_| global_bottom.clone()).collect();
        let mut wm_loss = 0.0;

        let client_loss = if cfg.parallel {
            let losses = parallel_round(&mut top, &mut bottoms, data, cfg, round)?;
            if wm_active {
                wm_loss = fw.unwrap().apply_step(&mut top, cfg.lr * cfg.alpha)?;
            }
            losses
        } else {
            let mut losses = Vec::with_capacity(cfg.clients);
            for k in 0..cfg.clients {
                if cfg.passive_clients.contains(&k) {
                    losses.push(0.0); // no batches served
                    continue;
                }
                losses.push(serve_client(&mut top, &mut bottoms[k], &data[k], cfg, round, k)?);
                if wm_active && !cfg.wm_per_round_only {
                    wm_loss = fw.unwrap().apply_step(&mut top, cfg.lr * cfg.alpha)?;
                }
            }
            if wm_active && cfg.wm_per_round_only {
                wm_loss = fw.unwrap().apply_step(&mut top, cfg.lr * cfg.alpha)?;
            }
            losses
        };

        global_bottom = fedavg(&bottoms, &weights)?;

        let snapshot = SplitModelPair {
            bottom: global_bottom.clone(),
            top: top.clone(),
            split_index,
        };
        let eval_acc = match eval {
            Some(ds) => Some(snapshot.accuracy_on(ds)?),
            None => None,
        };
        let theta_f = match fw {
            Some(fw) => Some(crate::watermark::verify_top(&top, fw)?),
            None => None,
        };
        history.push(RoundRecord {
            round,
            client_loss,
            wm_loss,
            eval_acc,
            theta_f,
        });
    }

    top.clear_caches();
    top.zero_grads();
    global_bottom.clear_caches();
    global_bottom.zero_grads();
    Ok((
        SplitModelPair {
            bottom: global_bottom,
            top,
            split_index,
        },
        history,
    ))
}
