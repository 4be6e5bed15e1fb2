//! Watermark removal and evasion attacks.
//!
//! The attacker holds a stolen bottom/top pair and a limited clean dataset.
//! Fine-tuning retrains through the split protocol; pruning zeroes the
//! smallest-magnitude weights globally; quantization rounds parameters to
//! reduced precision; trigger reverse-engineering searches for a minimal
//! input patch that forces a target class, optionally followed by an
//! unlearning pass that fine-tunes against the recovered triggers.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::loss::{predictions, softmax_cross_entropy};
use crate::model::Model;
use crate::seed;
use crate::sfl::{train, SplitModelPair, TrainConfig};
use crate::tensor::Tensor;
use crate::trigger::TriggerPattern;
use rand::seq::SliceRandom;
use rand::Rng;

const MAGIC: &[u8; 4] = b"SMT1";
const VERSION: u16 = 1;

/// Quantization scheme: half-precision rounding or symmetric uniform
/// integer quantize-dequantize with k bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantScheme {
    Fp16,
    IntK(u8),
}

impl QuantScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(QuantScheme::Fp16),
            other => {
                let k: u8 = other
                    .strip_prefix("int")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown quantization scheme {other}")))?;
                if !(2..=32).contains(&k) {
                    return Err(Error::Config(format!(
                        "int-k quantization needs k in [2,32], got {k}"
                    )));
                }
                Ok(QuantScheme::IntK(k))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            QuantScheme::Fp16 => "fp16".into(),
            QuantScheme::IntK(k) => format!("int{k}"),
        }
    }
}

/// Attack hyperparameters.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub finetune_epochs: u32,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub prune_rate: f64,
    pub quant_scheme: QuantScheme,
    pub nc_iterations: u32,
    /// Mask-sparsity weight in the trigger recovery objective.
    pub nc_lambda: f64,
    /// Gradient-descent step size for trigger recovery.
    pub nc_step: f64,
    pub nc_anomaly_threshold: f64,
    pub unlearn_epochs: u32,
    pub unlearn_lr: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            finetune_epochs: 15,
            finetune_lr: 0.05,
            batch_size: 25,
            prune_rate: 0.5,
            quant_scheme: QuantScheme::IntK(8),
            nc_iterations: 500,
            nc_lambda: 0.01,
            nc_step: 0.03,
            nc_anomaly_threshold: 2.0,
            unlearn_epochs: 5,
            unlearn_lr: 0.05,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_rate) {
            return Err(Error::Config(format!(
                "prune rate must lie in [0,1], got {}",
                self.prune_rate
            )));
        }
        if let QuantScheme::IntK(k) = self.quant_scheme {
            if !(2..=32).contains(&k) {
                return Err(Error::Config(format!("int-k needs k in [2,32], got {k}")));
            }
        }
        Ok(())
    }
}

/// Retrains the stolen pair end-to-end on clean data through the split
/// protocol, with no watermark loss. Zero epochs or a zero step size leave
/// the pair untouched.
pub fn finetune(
    pair: &SplitModelPair,
    clean: &LabeledDataset,
    epochs: u32,
    lr: f64,
    batch_size: usize,
    seed_v: u64,
) -> Result<SplitModelPair> {
    if epochs == 0 || lr == 0.0 {
        return Ok(pair.clone());
    }
    let cfg = TrainConfig {
        clients: 1,
        rounds: epochs,
        batch_size,
        lr,
        alpha: 0.0,
        feature_wm: false,
        rho: 0.0,
        dp_sigma: 0.0,
        dp_clip: 0.0,
        seed: seed_v,
        wm_per_round_only: false,
        parallel: false,
        passive_clients: vec![],
    };
    let (tuned, _) = train(&cfg, pair.clone(), std::slice::from_ref(clean), None, None)?;
    Ok(tuned)
}

/// Global magnitude pruning: the smallest ceil(rate * n) parameters by
/// absolute value, over every learnable tensor (normalization scales and
/// biases included), are set to exactly 0.
pub fn prune(model: &Model, rate: f64) -> Result<Model> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("prune rate must lie in [0,1], got {rate}")));
    }
    let mut out = model.clone();
    out.clear_caches();
    out.zero_grads();
    let mut entries: Vec<(f64, usize)> = Vec::new();
    let mut flat = 0usize;
    for layer in out.layers() {
        for (_, p, _, _) in layer.params() {
            for &v in p.data() {
                entries.push((v.abs(), flat));
                flat += 1;
            }
        }
    }
    let k = ((rate * flat as f64).ceil() as usize).min(flat);
    if k == 0 {
        return Ok(out);
    }
    entries.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut zero = vec![false; flat];
    for &(_, idx) in &entries[..k] {
        zero[idx] = true;
    }
    let mut flat = 0usize;
    for layer in out.layers_mut() {
        for (_, p) in layer.params_mut() {
            for v in p.data_mut() {
                if zero[flat] {
                    *v = 0.0;
                }
                flat += 1;
            }
        }
    }
    Ok(out)
}

/// Round-to-nearest-even conversion of an f32 payload to IEEE 754 binary16.
fn f32_to_f16_bits(f: f32) -> u16 {
    let x = f.to_bits();
    let sign = ((x >> 16) & 0x8000) as u16;
    let exp = ((x >> 23) & 0xFF) as i32;
    let man = x & 0x007F_FFFF;
    if exp == 255 {
        // Inf / NaN propagate.
        return sign | 0x7C00 | (u16::from(man != 0) << 9);
    }
    let e16 = exp - 127 + 15;
    if e16 >= 31 {
        return sign | 0x7C00; // overflow to infinity
    }
    if e16 <= 0 {
        if e16 < -10 {
            return sign; // underflow to signed zero
        }
        // Subnormal: implicit bit, shift, round to nearest even.
        let man = man | 0x0080_0000;
        let shift = (14 - e16) as u32;
        let half = 1u32 << (shift - 1);
        let rem = man & ((1u32 << shift) - 1);
        let mut m = man >> shift;
        if rem > half || (rem == half && m & 1 == 1) {
            m += 1;
        }
        return sign | m as u16;
    }
    let half = 1u32 << 12;
    let rem = man & 0x1FFF;
    let mut m = man >> 13;
    let mut e16 = e16;
    if rem > half || (rem == half && m & 1 == 1) {
        m += 1;
        if m == 0x400 {
            m = 0;
            e16 += 1;
            if e16 >= 31 {
                return sign | 0x7C00;
            }
        }
    }
    sign | ((e16 as u16) << 10) | m as u16
}

fn f16_bits_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1F) as i32;
    let man = (h & 0x3FF) as f64;
    match exp {
        0 => sign * man * (-24f64).exp2(),
        31 => {
            if man == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        e => sign * (1.0 + man / 1024.0) * f64::from(e - 15).exp2(),
    }
}

/// Rounds a value to the nearest half-precision-representable number.
pub fn f16_round(v: f64) -> f64 {
    f16_bits_to_f64(f32_to_f16_bits(v as f32))
}

/// Reduces parameter precision per the scheme. Integer schemes quantize per
/// tensor with symmetric scale max|w| / (2^(k-1) - 1); an all-zero tensor has
/// scale 0 and is left unchanged. Running statistics are not parameters and
/// stay untouched.
pub fn quantize(model: &Model, scheme: QuantScheme) -> Result<Model> {
    if let QuantScheme::IntK(k) = scheme {
        if !(2..=32).contains(&k) {
            return Err(Error::Config(format!("int-k needs k in [2,32], got {k}")));
        }
    }
    let mut out = model.clone();
    out.clear_caches();
    out.zero_grads();
    for layer in out.layers_mut() {
        for (_, p) in layer.params_mut() {
            match scheme {
                QuantScheme::Fp16 => {
                    for v in p.data_mut() {
                        *v = f16_round(*v);
                    }
                }
                QuantScheme::IntK(k) => {
                    let qmax = ((1u64 << (k - 1)) - 1) as f64;
                    let max_abs = p.max_abs();
                    if max_abs == 0.0 {
                        continue;
                    }
                    let scale = max_abs / qmax;
                    for v in p.data_mut() {
                        let q = (*v / scale).round().clamp(-qmax, qmax);
                        *v = q * scale;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A trigger recovered by gradient descent on the input space.
#[derive(Debug, Clone)]
pub struct ReversedTrigger {
    pub class: usize,
    /// Soft mask over (h, w) in [0,1].
    pub mask: Tensor,
    /// Pattern over (c, h, w) in [0,1].
    pub pattern: Tensor,
    pub mask_l1: f64,
    /// Attack success rate on held-out probes.
    pub asr: f64,
}

impl ReversedTrigger {
    /// Wraps a real trigger pattern so it can drive an unlearning pass (the
    /// ground-truth oracle). The asr field is unmeasured and set to 0.
    pub fn from_pattern(trig: &TriggerPattern) -> Self {
        ReversedTrigger {
            class: trig.target_class,
            mask_l1: trig.mask.data().iter().sum(),
            mask: trig.mask.clone(),
            pattern: trig.pattern.clone(),
            asr: 0.0,
        }
    }

    /// Blends the trigger onto one (c, h, w) sample with the soft mask.
    pub fn stamp(&self, sample: &Tensor) -> Result<Tensor> {
        if sample.shape() != self.pattern.shape() {
            return Err(Error::Shape(format!(
                "sample {:?} does not match trigger {:?}",
                sample.shape(),
                self.pattern.shape()
            )));
        }
        let (c, hw) = (sample.shape()[0], self.mask.len());
        let mut out = sample.clone();
        let (md, pd) = (self.mask.data(), self.pattern.data());
        let od = out.data_mut();
        for ci in 0..c {
            for i in 0..hw {
                od[ci * hw + i] = (1.0 - md[i]) * od[ci * hw + i] + md[i] * pd[ci * hw + i];
            }
        }
        Ok(out)
    }

    fn stamp_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = [batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]];
        let mut data = Vec::with_capacity(batch.len());
        let sz = c * h * w;
        for i in 0..n {
            let s = Tensor::new(vec![c, h, w], batch.data()[i * sz..(i + 1) * sz].to_vec())?;
            data.extend_from_slice(self.stamp(&s)?.data());
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    /// Condenses the soft mask into a legitimate-looking claim: a binary mask
    /// keeping the heaviest pixels within the stealthiness budget, paired
    /// with the recovered pattern. This is how an active free-rider submits
    /// a forged trigger to the audit.
    pub fn to_claim(&self, num_classes: usize) -> Result<TriggerPattern> {
        let hw = self.mask.len();
        let budget = (crate::trigger::MAX_SUPPORT * hw as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..hw).collect();
        idx.sort_unstable_by(|&a, &b| {
            self.mask.data()[b]
                .partial_cmp(&self.mask.data()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut mask = Tensor::zeros(self.mask.shape());
        for &i in idx.iter().take(budget) {
            if self.mask.data()[i] > 0.0 {
                mask.data_mut()[i] = 1.0;
            }
        }
        let mut pattern = self.pattern.clone();
        for v in pattern.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        TriggerPattern::new(mask, pattern, self.class, u32::MAX, 0, num_classes)
    }

    /// SMT1 encoding: magic "SMT1", version u16, class u16, c/h/w u32,
    /// mask f32 LE, pattern f32 LE, asr f32, trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = [self.pattern.shape()[0], self.pattern.shape()[1], self.pattern.shape()[2]];
        let mut wr = Writer::new(VERSION);
        wr.u16(self.class as u16);
        wr.u32(c as u32);
        wr.u32(h as u32);
        wr.u32(w as u32);
        wr.f32_slice(self.mask.data());
        wr.f32_slice(self.pattern.data());
        wr.f32(self.asr as f32);
        wr.finish(MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "trigger")?;
        let class = r.u16()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let mask = Tensor::new(vec![h, w], r.f32_vec(h * w)?)?;
        let pattern = Tensor::new(vec![c, h, w], r.f32_vec(c * h * w)?)?;
        let asr = r.f32()? as f64;
        r.expect_end()?;
        Ok(ReversedTrigger {
            class,
            mask_l1: mask.data().iter().sum(),
            mask,
            pattern,
            asr,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ReversedTrigger::from_bytes(&read_file(path)?)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reverse-engineers a candidate trigger for `class`: jointly optimizes a
/// soft mask and pattern by plain gradient descent on
/// CE(top(bottom(x blended)), class) + lambda * ||mask||_1, with both kept in
/// [0,1] through a sigmoid parameterization. Probes with true label `class`
/// are excluded; a held-out half of the remainder measures the attack
/// success rate.
pub fn reverse_trigger(
    pair: &SplitModelPair,
    class: usize,
    probe: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<ReversedTrigger> {
    cfg.validate()?;
    let eligible: Vec<usize> = (0..probe.len())
        .filter(|&i| probe.labels()[i] != class)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Data("need at least two probe samples".into()));
    }
    let mut order = eligible;
    let mut rng = seed::rng(cfg.seed, &[seed::tag::ATTACK, class as u64]);
    order.shuffle(&mut rng);
    let hold = order.len() / 2;
    let holdout: Vec<usize> = order[..hold].to_vec();
    let optset: Vec<usize> = order[hold..].to_vec();

    let [c, h, w] = probe.sample_shape();
    let hw = h * w;
    // Logit parameterization keeps mask and pattern inside [0,1].
    let mut a: Vec<f64> = (0..hw).map(|_| -2.0 + 0.1 * rng.gen_range(-1.0..1.0)).collect();
    let mut b: Vec<f64> = (0..c * hw).map(|_| 0.1 * rng.gen_range(-1.0..1.0)).collect();

    let mut work = pair.clone();
    let batch_cap = cfg.batch_size.min(optset.len()).max(1);
    for it in 0..cfg.nc_iterations {
        let start = (it as usize * batch_cap) % optset.len();
        let chunk: Vec<usize> =
            (0..batch_cap).map(|j| optset[(start + j) % optset.len()]).collect();
        let (bx, _) = probe.batch(&chunk);
        let n = chunk.len();

        let m: Vec<f64> = a.iter().map(|&v| sigmoid(v)).collect();
        let p: Vec<f64> = b.iter().map(|&v| sigmoid(v)).collect();

        // Blend: x' = (1 - m) x + m p.
        let mut blended = bx.clone();
        {
            let bd = blended.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        bd[base + i] = (1.0 - m[i]) * bd[base + i] + m[i] * p[ci * hw + i];
                    }
                }
            }
        }

        // Eval-mode forward/backward: running statistics stay fixed and the
        // input gradient matches the deployed (eval) behavior.
        let z = work.bottom.forward(&blended, Mode::Eval)?;
        let logits = work.top.forward(&z, Mode::Eval)?;
        let labels = vec![class; n];
        let (_, upstream) = softmax_cross_entropy(&logits, &labels)?;
        let gz = work.top.backward(&upstream)?;
        let gx = work.bottom.backward(&gz)?;
        work.bottom.zero_grads();
        work.top.zero_grads();

        // Chain rule into the mask/pattern logits.
        let (gxd, bxd) = (gx.data(), bx.data());
        let mut gm = vec![0.0; hw];
        let mut gp = vec![0.0; c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let g = gxd[base + i];
                    gm[i] += g * (p[ci * hw + i] - bxd[base + i]);
                    gp[ci * hw + i] += g * m[i];
                }
            }
        }
        for i in 0..hw {
            let sp = m[i] * (1.0 - m[i]);
            a[i] -= cfg.nc_step * (gm[i] + cfg.nc_lambda) * sp;
        }
        for i in 0..c * hw {
            let sp = p[i] * (1.0 - p[i]);
            b[i] -= cfg.nc_step * gp[i] * sp;
        }
    }

    let mask = Tensor::new(vec![h, w], a.iter().map(|&v| sigmoid(v)).collect())?;
    let pattern = Tensor::new(vec![c, h, w], b.iter().map(|&v| sigmoid(v)).collect())?;
    let mut trig = ReversedTrigger {
        class,
        mask_l1: mask.data().iter().sum(),
        mask,
        pattern,
        asr: 0.0,
    };

    let (hx, _) = probe.batch(&holdout);
    let stamped = trig.stamp_batch(&hx)?;
    let preds = predictions(&pair.infer(&stamped)?);
    trig.asr = preds.iter().filter(|&&p| p == class).count() as f64 / holdout.len() as f64;
    Ok(trig)
}

/// Median-absolute-deviation anomaly score per class. A class is flagged as
/// backdoored when its index exceeds the threshold AND its mask norm sits
/// below the median (backdoor triggers are abnormally small). A zero MAD
/// defines all indices as 0.
pub fn anomaly_index(mask_norms: &[f64], threshold: f64) -> Result<Vec<(f64, bool)>> {
    if mask_norms.len() < 3 {
        return Err(Error::Config(format!(
            "anomaly index needs at least 3 classes, got {}",
            mask_norms.len()
        )));
    }
    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        }
    };
    let med = median(&mut mask_norms.to_vec());
    let mad = median(&mut mask_norms.iter().map(|&v| (v - med).abs()).collect());
    Ok(mask_norms
        .iter()
        .map(|&v| {
            let idx = if mad == 0.0 {
                0.0
            } else {
                (v - med).abs() / (1.4826 * mad)
            };
            (idx, idx > threshold && v < med)
        })
        .collect())
}

/// Unlearning pass: fine-tunes the pair on clean samples mixed with
/// trigger-stamped samples that keep their TRUE labels, teaching the model
/// to ignore the recovered triggers.
pub fn unlearn(
    pair: &SplitModelPair,
    triggers: &[ReversedTrigger],
    clean: &LabeledDataset,
    epochs: u32,
    lr: f64,
    batch_size: usize,
    seed_v: u64,
) -> Result<SplitModelPair> {
    if triggers.is_empty() || epochs == 0 || lr == 0.0 {
        return Ok(pair.clone());
    }
    // Mixture: every clean sample, plus ~30% stamped copies split across the
    // triggers, relabeled to their true classes.
    let per_trigger = ((0.3 * clean.len() as f64) / triggers.len() as f64).ceil() as usize;
    let [c, h, w] = clean.sample_shape();
    let mut data = clean.samples().data().to_vec();
    let mut labels = clean.labels().to_vec();
    let mut rng = seed::rng(seed_v, &[seed::tag::ATTACK, 0xA11]);
    for trig in triggers {
        for _ in 0..per_trigger.min(clean.len()) {
            let i = rng.gen_range(0..clean.len());
            let stamped = trig.stamp(&clean.sample(i))?;
            data.extend_from_slice(stamped.data());
            labels.push(clean.labels()[i]);
        }
    }
    let n = labels.len();
    let mixed = LabeledDataset::new(
        Tensor::new(vec![n, c, h, w], data)?,
        labels,
        clean.num_classes(),
    )?;
    finetune(pair, &mixed, epochs, lr, batch_size, seed_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Layer;

    fn tiny_model(seed_v: u64) -> Model {
        let mut rng = seed::rng(seed_v, &[seed::tag::MODEL_INIT]);
        Model::new(
            vec![6],
            vec![
                Layer::dense(6, 8, &mut rng),
                Layer::scalenorm(8),
                Layer::relu(),
                Layer::dense(8, 3, &mut rng),
            ],
        )
        .unwrap()
    }

    fn state_of(m: &Model) -> Vec<f64> {
        m.layers()
            .iter()
            .flat_map(|l| l.state())
            .flat_map(|t| t.data().to_vec())
            .collect()
    }

    #[test]
    fn prune_zero_rate_is_identity_and_quantile_holds() {
        let m = tiny_model(1);
        assert_eq!(state_of(&prune(&m, 0.0).unwrap()), state_of(&m));

        let rate = 0.4;
        let pruned = prune(&m, rate).unwrap();
        let mut total = 0usize;
        let mut zeros = 0usize;
        for l in pruned.layers() {
            for (_, p, _, _) in l.params() {
                total += p.len();
                zeros += p.data().iter().filter(|&&v| v == 0.0).count();
            }
        }
        assert!(zeros as f64 / total as f64 >= rate);
    }

    #[test]
    fn prune_is_idempotent_at_the_same_rate() {
        let m = tiny_model(2);
        let once = prune(&m, 0.3).unwrap();
        let twice = prune(&once, 0.3).unwrap();
        assert_eq!(state_of(&once), state_of(&twice));
    }

    #[test]
    fn f16_rounding_known_values() {
        assert_eq!(f16_round(1.0), 1.0);
        assert_eq!(f16_round(0.5), 0.5);
        // Nearest representable binary16 value below 0.1.
        assert_eq!(f16_round(0.1), 0.0999755859375);
        // Max finite f16.
        assert_eq!(f16_round(65504.0), 65504.0);
        // Smallest subnormal survives.
        let tiny = (-24f64).exp2();
        assert_eq!(f16_round(tiny), tiny);
        assert_eq!(f16_round(-2.0), -2.0);
    }

    #[test]
    fn quantize_fp16_identity_on_representable_values() {
        let mut m = tiny_model(3);
        for l in m.layers_mut() {
            for (_, p) in l.params_mut() {
                for v in p.data_mut() {
                    *v = f16_round(*v);
                }
            }
        }
        let q = quantize(&m, QuantScheme::Fp16).unwrap();
        assert_eq!(state_of(&q), state_of(&m));
    }

    #[test]
    fn int8_roundtrip_error_bounded_by_half_scale() {
        let m = tiny_model(4);
        let q = quantize(&m, QuantScheme::IntK(8)).unwrap();
        for (lo, lq) in m.layers().iter().zip(q.layers()) {
            for ((_, po, _, _), (_, pq, _, _)) in lo.params().iter().zip(lq.params()) {
                let scale = po.max_abs() / 127.0;
                for (a, b) in po.data().iter().zip(pq.data()) {
                    assert!((a - b).abs() <= scale / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn quantize_is_idempotent_per_scheme() {
        let m = tiny_model(5);
        for scheme in [QuantScheme::Fp16, QuantScheme::IntK(8), QuantScheme::IntK(32)] {
            let once = quantize(&m, scheme).unwrap();
            let twice = quantize(&once, scheme).unwrap();
            assert_eq!(state_of(&once), state_of(&twice), "{}", scheme.name());
        }
    }

    #[test]
    fn quantize_leaves_all_zero_tensors_alone() {
        let mut m = tiny_model(6);
        if let Layer::Dense(d) = &mut m.layers_mut()[0] {
            d.b.data_mut().fill(0.0);
        }
        let q = quantize(&m, QuantScheme::IntK(8)).unwrap();
        if let Layer::Dense(d) = &q.layers()[0] {
            assert!(d.b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn anomaly_index_cases() {
        // Constant norms: all indices 0, nothing flagged.
        let r = anomaly_index(&[5.0, 5.0, 5.0, 5.0], 2.0).unwrap();
        assert!(r.iter().all(|&(i, f)| i == 0.0 && !f));

        // MAD = 0 with one outlier: degenerate rule keeps indices at 0.
        let r = anomaly_index(&[10.0, 10.0, 10.0, 10.0, 1.0], 2.0).unwrap();
        assert!(r.iter().all(|&(i, f)| i == 0.0 && !f));

        // Hand-evaluated: norms (10, 11, 9, 12, 1), median 10, MAD 1.
        // Outlier index = 9 / 1.4826 = 6.07 > 2, and 1 < 10, so flagged.
        let r = anomaly_index(&[10.0, 11.0, 9.0, 12.0, 1.0], 2.0).unwrap();
        assert!((r[4].0 - 9.0 / 1.4826).abs() < 1e-12);
        assert!(r[4].1);
        assert!(!r[0].1 && !r[1].1 && !r[2].1 && !r[3].1);
        // The high side is never flagged, whatever its index.
        let r = anomaly_index(&[10.0, 10.5, 9.5, 10.0, 30.0], 2.0).unwrap();
        assert!(!r[4].1);
    }

    #[test]
    fn quant_scheme_parsing() {
        assert_eq!(QuantScheme::parse("fp16").unwrap(), QuantScheme::Fp16);
        assert_eq!(QuantScheme::parse("int8").unwrap(), QuantScheme::IntK(8));
        assert_eq!(QuantScheme::parse("int32").unwrap(), QuantScheme::IntK(32));
        assert!(QuantScheme::parse("int33").is_err());
        assert!(QuantScheme::parse("int1").is_err());
        assert!(QuantScheme::parse("float").is_err());
    }

    #[test]
    fn smt1_roundtrip() {
        let mut rng = seed::rng(8, &[1]);
        let mask = Tensor::from_rng(&[4, 4], &mut rng, |r| r.gen_range(0.0..1.0));
        let trig = ReversedTrigger {
            class: 2,
            mask_l1: mask.data().iter().sum(),
            mask,
            pattern: Tensor::from_rng(&[1, 4, 4], &mut rng, |r| r.gen_range(0.0..1.0)),
            asr: 0.625,
        };
        let back = ReversedTrigger::from_bytes(&trig.to_bytes()).unwrap();
        assert_eq!(back.class, 2);
        assert_eq!(back.mask.data(), trig.mask.data());
        assert_eq!(back.pattern.data(), trig.pattern.data());
        assert!((back.asr - 0.625).abs() < 1e-6);
        assert!((back.mask_l1 - trig.mask_l1).abs() < 1e-9);
    }

    #[test]
    fn claim_mask_respects_stealthiness_budget() {
        let mut rng = seed::rng(9, &[2]);
        let mask = Tensor::from_rng(&[16, 16], &mut rng, |r| r.gen_range(0.0..1.0));
        let trig = ReversedTrigger {
            class: 1,
            mask_l1: mask.data().iter().sum(),
            mask,
            pattern: Tensor::from_rng(&[1, 16, 16], &mut rng, |r| r.gen_range(0.0..1.0)),
            asr: 0.0,
        };
        let claim = trig.to_claim(4).unwrap();
        assert!(claim.support() <= 12); // floor(0.05 * 256)
        assert_eq!(claim.target_class, 1);
    }
}
