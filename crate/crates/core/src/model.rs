//! Ordered layer stack with shape validation, backprop, SGD, gradient
//! checking, and the SMK1 checkpoint format.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::layer::{Layer, Mode};
use crate::loss::{evaluate, LossKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SMK1";
const VERSION: u16 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV2D: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_SCALENORM: u8 = 5;

/// A feed-forward model: ordered layers plus the declared per-sample input
/// shape. A 0 in the input shape means "any extent" (conv stacks without a
/// flatten are polymorphic in height and width).
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl Model {
    /// Builds a model, checking that consecutive layer shapes are compatible.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.out_shape(&shape).map_err(|e| {
                Error::Shape(format!("layer {i} ({}): {e}", layer.kind_name()))
            })?;
        }
        Ok(Model { layers, input_shape })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape under the declared input shape.
    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.out_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, p, _, _)| p.len())
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != self.input_shape.len() + 1 {
            return Err(Error::Shape(format!(
                "batch rank {} incompatible with input shape {:?}",
                s.len(),
                self.input_shape
            )));
        }
        for (got, want) in s[1..].iter().zip(&self.input_shape) {
            if *want != 0 && got != want {
                return Err(Error::Shape(format!(
                    "batch shape {s:?} incompatible with input shape {:?}",
                    self.input_shape
                )));
            }
        }
        batch.check_finite("forward input")
    }

    /// Forward pass over a batch (leading batch dimension). Train mode caches
    /// intermediates and updates normalization statistics.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        x.check_finite("forward")?;
        Ok(x)
    }

    /// Cache-free eval forward; safe to call concurrently on shared clones.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        x.check_finite("infer")?;
        Ok(x)
    }

    /// Backpropagates `upstream` through the cached forward pass, accumulating
    /// parameter gradients; returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        g.check_finite("backward")?;
        Ok(g)
    }

    /// One SGD step on every trainable parameter, then zeros all gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        for layer in &mut self.layers {
            layer.sgd_step(lr);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }

    /// Architectural fingerprint: kinds plus state-tensor shapes. Two models
    /// must agree on this to be aggregated or compared.
    pub fn arch_signature(&self) -> Vec<(String, Vec<Vec<usize>>)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    l.kind_name().to_string(),
                    l.state().iter().map(|t| t.shape().to_vec()).collect(),
                )
            })
            .collect()
    }

    /// Central-difference gradient check: returns the max over parameters of
    /// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ///
    /// Running statistics are snapshotted and restored around every probe so
    /// the loss is a pure function of the parameters.
    pub fn grad_check(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        eps: f64,
        kind: LossKind,
        mode: Mode,
    ) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
        }
        if self.num_params() > 10_000 {
            return Err(Error::Config(format!(
                "grad_check is for small models (got {} parameters, limit 10000)",
                self.num_params()
            )));
        }

        let stats_snapshot: Vec<Vec<f64>> = self
            .layers
            .iter()
            .flat_map(|l| l.state())
            .map(|t| t.data().to_vec())
            .collect();
        let restore = |m: &mut Model, snap: &[Vec<f64>]| {
            let mut it = snap.iter();
            for layer in &mut m.layers {
                for t in layer.state_mut() {
                    t.data_mut().copy_from_slice(it.next().unwrap());
                }
            }
        };

        // Analytic gradients.
        self.zero_grads();
        let out = self.forward(batch, mode)?;
        let (_, upstream) = evaluate(kind, &out, labels)?;
        self.backward(&upstream)?;
        let analytic: Vec<f64> = self
            .layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|(_, _, g, _)| g.data().to_vec())
            .collect();
        restore(self, &stats_snapshot);
        self.zero_grads();

        // Numeric probes, one parameter at a time.
        let mut max_err = 0.0f64;
        let mut flat_idx = 0usize;
        let n_layers = self.layers.len();
        for li in 0..n_layers {
            let n_tensors = self.layers[li].params().len();
            for ti in 0..n_tensors {
                let len = self.layers[li].params()[ti].1.len();
                for vi in 0..len {
                    let orig = self.layers[li].params()[ti].1.data()[vi];
                    let probe = |m: &mut Model, v: f64| -> Result<f64> {
                        m.layers[li].params_mut()[ti].1.data_mut()[vi] = v;
                        let out = m.forward(batch, mode)?;
                        let (loss, _) = evaluate(kind, &out, labels)?;
                        restore(m, &stats_snapshot);
                        Ok(loss)
                    };
                    let lp = probe(self, orig + eps)?;
                    let lm = probe(self, orig - eps)?;
                    self.layers[li].params_mut()[ti].1.data_mut()[vi] = orig;
                    let numeric = (lp - lm) / (2.0 * eps);
                    let a = analytic[flat_idx];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    max_err = max_err.max(err);
                    flat_idx += 1;
                }
            }
        }
        self.clear_caches();
        Ok(max_err)
    }

    /// Encodes the model in the SMK1 checkpoint format.
    ///
    /// Layout: magic "SMK1", version u16 LE, layer count u16 LE, then per
    /// layer a kind tag u8, shape rank u8, dims u32 LE, and all state tensors
    /// as f32 LE in enumeration order; trailing CRC32 of the payload. The
    /// per-kind shape is: dense (out, in); conv2d (out_c, in_c, kh, kw);
    /// flatten (c, h, w); scalenorm (c); relu none.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(VERSION);
        w.u16(self.layers.len() as u16);
        for layer in &self.layers {
            let (tag, dims): (u8, Vec<usize>) = match layer {
                Layer::Dense(d) => (TAG_DENSE, d.w.shape().to_vec()),
                Layer::Conv2d(c) => (TAG_CONV2D, c.w.shape().to_vec()),
                Layer::Relu(_) => (TAG_RELU, vec![]),
                Layer::Flatten(f) => (TAG_FLATTEN, f.in_shape.to_vec()),
                Layer::ScaleNorm(s) => (TAG_SCALENORM, vec![s.gamma.len()]),
            };
            w.u8(tag);
            w.u8(dims.len() as u8);
            for d in dims {
                w.u32(d as u32);
            }
            for t in layer.state() {
                w.f32_slice(t.data());
            }
        }
        w.finish(MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "checkpoint")?;
        let n_layers = r.u16()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let layer = match tag {
                TAG_DENSE => {
                    if dims.len() != 2 {
                        return Err(Error::Format("dense layer needs rank-2 dims".into()));
                    }
                    let (out, inp) = (dims[0], dims[1]);
                    let w = Tensor::new(vec![out, inp], r.f32_vec(out * inp)?)?;
                    let b = Tensor::new(vec![out], r.f32_vec(out)?)?;
                    Layer::dense_from(w, b)?
                }
                TAG_CONV2D => {
                    if dims.len() != 4 {
                        return Err(Error::Format("conv2d layer needs rank-4 dims".into()));
                    }
                    let count = dims.iter().product();
                    let w = Tensor::new(dims.clone(), r.f32_vec(count)?)?;
                    let b = Tensor::new(vec![dims[0]], r.f32_vec(dims[0])?)?;
                    let mut rng = crate::seed::rng(0, &[]);
                    let mut l = Layer::conv2d(dims[1], dims[0], dims[2], &mut rng)?;
                    if let Layer::Conv2d(c) = &mut l {
                        c.w = w;
                        c.b = b;
                    }
                    l
                }
                TAG_RELU => Layer::relu(),
                TAG_FLATTEN => {
                    if dims.len() != 3 {
                        return Err(Error::Format("flatten layer needs rank-3 dims".into()));
                    }
                    Layer::flatten(dims[0], dims[1], dims[2])
                }
                TAG_SCALENORM => {
                    if dims.len() != 1 {
                        return Err(Error::Format("scalenorm layer needs rank-1 dims".into()));
                    }
                    let c = dims[0];
                    let mut l = Layer::scalenorm(c);
                    if let Layer::ScaleNorm(s) = &mut l {
                        s.gamma = Tensor::new(vec![c], r.f32_vec(c)?)?;
                        s.beta = Tensor::new(vec![c], r.f32_vec(c)?)?;
                        s.run_mean = Tensor::new(vec![c], r.f32_vec(c)?)?;
                        s.run_var = Tensor::new(vec![c], r.f32_vec(c)?)?;
                    }
                    l
                }
                other => return Err(Error::Format(format!("unknown layer tag {other}"))),
            };
            layers.push(layer);
        }
        r.expect_end()?;
        let input_shape = infer_input_shape(&layers);
        Model::new(input_shape, layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Model::from_bytes(&read_file(path)?)
    }
}

/// Reconstructs the per-sample input shape from a layer stack. The leading
/// parameterized layer fixes the channel/feature count; a downstream flatten
/// pins spatial extents (everything before it is stride-1 "same", so they
/// propagate unchanged). Conv stacks without a flatten stay polymorphic (0).
fn infer_input_shape(layers: &[Layer]) -> Vec<usize> {
    let spatial = layers.iter().find_map(|l| match l {
        Layer::Flatten(f) => Some((f.in_shape[1], f.in_shape[2])),
        _ => None,
    });
    for layer in layers {
        match layer {
            Layer::Dense(d) => return vec![d.w.shape()[1]],
            Layer::Conv2d(c) => {
                let (h, w) = spatial.unwrap_or((0, 0));
                return vec![c.w.shape()[1], h, w];
            }
            Layer::Flatten(f) => return f.in_shape.to_vec(),
            Layer::ScaleNorm(s) => {
                // Ambiguous on its own; image-shaped if a flatten follows.
                return match spatial {
                    Some((h, w)) => vec![s.gamma.len(), h, w],
                    None => vec![s.gamma.len()],
                };
            }
            Layer::Relu(_) => continue,
        }
    }
    vec![]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn small_mlp(seed_v: u64) -> Model {
        let mut rng = seed::rng(seed_v, &[seed::tag::MODEL_INIT]);
        Model::new(
            vec![5],
            vec![
                Layer::dense(5, 7, &mut rng),
                Layer::relu(),
                Layer::scalenorm(7),
                Layer::dense(7, 3, &mut rng),
            ],
        )
        .unwrap()
    }

    #[test]
    fn construction_rejects_incompatible_shapes() {
        let mut rng = seed::rng(1, &[]);
        let err = Model::new(
            vec![4],
            vec![Layer::dense(5, 3, &mut rng)],
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn forward_validates_batch_shape_and_finiteness() {
        let mut m = small_mlp(3);
        assert!(matches!(
            m.forward(&Tensor::zeros(&[2, 4]), Mode::Train),
            Err(Error::Shape(_))
        ));
        let mut bad = Tensor::zeros(&[2, 5]);
        bad.data_mut()[0] = f64::INFINITY;
        assert!(matches!(
            m.forward(&bad, Mode::Train),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn grad_check_linear_model_quadratic_loss_is_exact() {
        let mut rng = seed::rng(9, &[]);
        let mut m = Model::new(vec![4], vec![Layer::dense(4, 3, &mut rng)]).unwrap();
        let batch = Tensor::from_rng(&[6, 4], &mut rng, |r| r.gen_range(-1.0..1.0));
        let labels = vec![0, 1, 2, 0, 1, 2];
        let err = m
            .grad_check(&batch, &labels, 1e-4, LossKind::SquaredError, Mode::Train)
            .unwrap();
        assert!(err < 1e-9, "expected near machine precision, got {err}");
    }

    #[test]
    fn grad_check_small_mlp_under_1e4() {
        let mut m = small_mlp(11);
        let mut rng = seed::rng(12, &[]);
        // Jitter inputs off relu kink points.
        let batch = Tensor::from_rng(&[4, 5], &mut rng, |r| r.gen_range(-1.0..1.0) + 0.01);
        let labels = vec![0, 1, 2, 1];
        let err = m
            .grad_check(&batch, &labels, 1e-4, LossKind::SoftmaxCrossEntropy, Mode::Train)
            .unwrap();
        assert!(err < 1e-4, "grad check failed: {err}");
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let mut m = small_mlp(2);
        let batch = Tensor::zeros(&[1, 5]);
        assert!(matches!(
            m.grad_check(&batch, &[0], 0.0, LossKind::SoftmaxCrossEntropy, Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn save_load_roundtrip_is_bitwise_on_fresh_models() {
        let m = small_mlp(21);
        let bytes = m.to_bytes();
        let m2 = Model::from_bytes(&bytes).unwrap();
        let a: Vec<f64> = m.layers().iter().flat_map(|l| l.state()).flat_map(|t| t.data().to_vec()).collect();
        let b: Vec<f64> = m2.layers().iter().flat_map(|l| l.state()).flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(a, b);
        assert_eq!(m.input_shape(), m2.input_shape());
        // Serialization is stable: encoding the reload gives identical bytes.
        assert_eq!(bytes, m2.to_bytes());
    }

    #[test]
    fn save_load_is_idempotent_after_training_steps() {
        let mut m = small_mlp(22);
        let mut rng = seed::rng(23, &[]);
        let batch = Tensor::from_rng(&[4, 5], &mut rng, |r| r.gen_range(-1.0..1.0));
        let out = m.forward(&batch, Mode::Train).unwrap();
        let (_, g) = crate::loss::softmax_cross_entropy(&out, &[0, 1, 2, 0]).unwrap();
        m.backward(&g).unwrap();
        m.sgd_step(0.1).unwrap();
        // One encode quantizes to f32; after that, reload/encode is stable.
        let once = Model::from_bytes(&m.to_bytes()).unwrap();
        let twice = Model::from_bytes(&once.to_bytes()).unwrap();
        let a: Vec<f64> = once.layers().iter().flat_map(|l| l.state()).flat_map(|t| t.data().to_vec()).collect();
        let b: Vec<f64> = twice.layers().iter().flat_map(|l| l.state()).flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = small_mlp(5);
        let b = small_mlp(5);
        let av: Vec<f64> = a.layers().iter().flat_map(|l| l.state()).flat_map(|t| t.data().to_vec()).collect();
        let bv: Vec<f64> = b.layers().iter().flat_map(|l| l.state()).flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(av, bv);
    }

    #[test]
    fn sgd_rejects_non_positive_lr() {
        let mut m = small_mlp(2);
        assert!(matches!(m.sgd_step(0.0), Err(Error::Config(_))));
        assert!(matches!(m.sgd_step(-0.1), Err(Error::Config(_))));
    }
}
