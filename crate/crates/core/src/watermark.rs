//! Dual-side ownership watermarks.
//!
//! Server side: a secret Gaussian embedding matrix projects the concatenated
//! normalization-scale vectors of chosen top-model layers onto N responses; a
//! hinge regularizer drives each response's sign to match a secret bit. The
//! detection rate `theta_F` is the fraction of responses with the right sign.
//!
//! Client side: a suspect bottom/top pair is queried with trigger-stamped
//! held-out samples; the detection rate `theta_B` is the fraction classified
//! as the trigger's target class. Ownership is decided by `theta_B >= tau`.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::model::Model;
use crate::seed;
use crate::sfl::SplitModelPair;
use crate::tensor::Tensor;
use crate::trigger::{apply_trigger, TriggerPattern};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const MAGIC: &[u8; 4] = b"SMW1";
const VERSION: u16 = 1;

/// Server-side watermark secret.
#[derive(Debug, Clone)]
pub struct FeatureWatermark {
    /// Embedding matrix, row-major (d, N): row j holds the projection weights
    /// of scale coordinate j onto all N responses.
    pub matrix: Tensor,
    /// Signature bits in {0,1}.
    pub bits: Vec<u8>,
    /// Indices of the target scalenorm layers inside the top model.
    pub target_layer_ids: Vec<usize>,
    /// Regularizer strength.
    pub alpha: f64,
    pub seed: u64,
}

impl FeatureWatermark {
    pub fn new(
        matrix: Tensor,
        bits: Vec<u8>,
        target_layer_ids: Vec<usize>,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding matrix must be (d, N), got {:?}",
                matrix.shape()
            )));
        }
        if matrix.shape()[1] != bits.len() || bits.is_empty() {
            return Err(Error::Shape(format!(
                "matrix has {} columns but signature has {} bits",
                matrix.shape()[1],
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Data("signature bits must be 0 or 1".into()));
        }
        // Every column must be nonzero to carry a bit.
        let (d, n) = (matrix.shape()[0], matrix.shape()[1]);
        for i in 0..n {
            if (0..d).all(|j| matrix.data()[j * n + i] == 0.0) {
                return Err(Error::Data(format!("embedding matrix column {i} is zero")));
            }
        }
        if alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        Ok(FeatureWatermark {
            matrix,
            bits,
            target_layer_ids,
            alpha,
            seed,
        })
    }

    /// Signature length N.
    pub fn num_bits(&self) -> usize {
        self.bits.len()
    }

    /// Scale-vector capacity d.
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Signed signature: s_i = 2*b_i - 1.
    pub fn signs(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| 2.0 * b as f64 - 1.0).collect()
    }

    /// Heuristic capacity check (d >= N/4); callers should warn when false.
    pub fn capacity_ok(&self) -> bool {
        4 * self.dim() >= self.num_bits()
    }

    /// Concatenates the target layers' scale vectors in layer order.
    pub fn extract_scales(&self, top: &Model) -> Result<Vec<f64>> {
        let mut w = Vec::with_capacity(self.dim());
        for &id in &self.target_layer_ids {
            match top.layers().get(id) {
                Some(Layer::ScaleNorm(s)) => w.extend_from_slice(s.gamma.data()),
                Some(other) => {
                    return Err(Error::Verification(format!(
                        "target layer {id} is {}, not scalenorm",
                        other.kind_name()
                    )))
                }
                None => {
                    return Err(Error::Verification(format!(
                        "target layer {id} missing (model has {} layers)",
                        top.layers().len()
                    )))
                }
            }
        }
        if w.len() != self.dim() {
            return Err(Error::Verification(format!(
                "target layers supply {} scales, watermark expects {}",
                w.len(),
                self.dim()
            )));
        }
        Ok(w)
    }

    /// Applies one SGD step on the hinge loss to the target scale vectors:
    /// gamma -= step * dL/dgamma. Returns the loss value before the step.
    pub fn apply_step(&self, top: &mut Model, step: f64) -> Result<f64> {
        let w = self.extract_scales(top)?;
        let (loss, grad) = wm_loss(&w, &self.matrix, &self.signs())?;
        let mut at = 0usize;
        for &id in &self.target_layer_ids {
            if let Some(Layer::ScaleNorm(s)) = top.layers_mut().get_mut(id) {
                let len = s.gamma.len();
                for (g, dg) in s.gamma.data_mut().iter_mut().zip(&grad[at..at + len]) {
                    *g -= step * dg;
                }
                at += len;
            }
        }
        Ok(loss)
    }

    /// SMW1 encoding: magic "SMW1", version u16, seed u64, alpha f32, N u32,
    /// layer-id count u16 + ids u32, d u32, matrix f32 LE row-major, bits
    /// packed 8 per byte (LSB first), trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(VERSION);
        w.u64(self.seed);
        w.f32(self.alpha as f32);
        w.u32(self.num_bits() as u32);
        w.u16(self.target_layer_ids.len() as u16);
        for &id in &self.target_layer_ids {
            w.u32(id as u32);
        }
        w.u32(self.dim() as u32);
        w.f32_slice(self.matrix.data());
        let mut packed = vec![0u8; self.num_bits().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            packed[i / 8] |= b << (i % 8);
        }
        w.bytes(&packed);
        w.finish(MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "watermark")?;
        let seed = r.u64()?;
        let alpha = r.f32()? as f64;
        let n = r.u32()? as usize;
        let id_count = r.u16()? as usize;
        let mut ids = Vec::with_capacity(id_count);
        for _ in 0..id_count {
            ids.push(r.u32()? as usize);
        }
        let d = r.u32()? as usize;
        let matrix = Tensor::new(vec![d, n], r.f32_vec(d * n)?)?;
        let packed = r.bytes(n.div_ceil(8))?.to_vec();
        r.expect_end()?;
        let bits: Vec<u8> = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        FeatureWatermark::new(matrix, bits, ids, alpha, seed)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        FeatureWatermark::from_bytes(&read_file(path)?)
    }
}

/// Generates the server watermark: i.i.d. standard-normal matrix entries and
/// fair signature bits, both from `seed_v`. Target layers must exist in the
/// top model and be scalenorm layers.
pub fn gen_feature_wm(
    seed_v: u64,
    n_bits: usize,
    target_layer_ids: &[usize],
    top: &Model,
    alpha: f64,
) -> Result<FeatureWatermark> {
    if n_bits == 0 {
        return Err(Error::Config("signature needs at least one bit".into()));
    }
    if target_layer_ids.is_empty() {
        return Err(Error::Config("need at least one target layer".into()));
    }
    let mut d = 0usize;
    for &id in target_layer_ids {
        match top.layers().get(id) {
            Some(Layer::ScaleNorm(s)) => d += s.gamma.len(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "target layer {id} is {}, not scalenorm",
                    other.kind_name()
                )))
            }
            None => return Err(Error::Config(format!("target layer {id} out of range"))),
        }
    }
    let mut rng = seed::rng(seed_v, &[seed::tag::WATERMARK]);
    let matrix = Tensor::from_rng(&[d, n_bits], &mut rng, |r| StandardNormal.sample(r));
    let bits: Vec<u8> = (0..n_bits).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    FeatureWatermark::new(matrix, bits, target_layer_ids.to_vec(), alpha, seed_v)
}

/// Watermark response: y_i = w . M[:, i].
pub fn wm_response(w: &[f64], matrix: &Tensor) -> Result<Vec<f64>> {
    let (d, n) = (matrix.shape()[0], matrix.shape()[1]);
    if w.len() != d {
        return Err(Error::Shape(format!(
            "scale vector has length {}, matrix expects {d}",
            w.len()
        )));
    }
    let md = matrix.data();
    let mut y = vec![0.0; n];
    for (j, &wj) in w.iter().enumerate() {
        let row = &md[j * n..(j + 1) * n];
        for (yi, &m) in y.iter_mut().zip(row) {
            *yi += wj * m;
        }
    }
    Ok(y)
}

/// Hinge embedding loss sum_i max(1 - s_i*y_i, 0) and its gradient w.r.t. w.
/// The subgradient at the hinge point is 0.
pub fn wm_loss(w: &[f64], matrix: &Tensor, signs: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (d, n) = (matrix.shape()[0], matrix.shape()[1]);
    if signs.len() != n {
        return Err(Error::Shape(format!(
            "{} signs for a {n}-column matrix",
            signs.len()
        )));
    }
    let y = wm_response(w, matrix)?;
    let md = matrix.data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for i in 0..n {
        let margin = 1.0 - signs[i] * y[i];
        if margin > 0.0 {
            loss += margin;
            for (j, g) in grad.iter_mut().enumerate() {
                *g -= signs[i] * md[j * n + i];
            }
        }
    }
    Ok((loss, grad))
}

/// Sign-agreement detection rate per the step-function scoring: bit i is
/// embedded iff s_i * y_i > 0 (the step function maps 0 to 1, so a zero
/// response counts as a failed bit).
pub fn verify_top(top: &Model, fw: &FeatureWatermark) -> Result<f64> {
    let w = fw.extract_scales(top)?;
    let y = wm_response(&w, &fw.matrix)?;
    let signs = fw.signs();
    let hits = y
        .iter()
        .zip(&signs)
        .filter(|(yi, si)| *si * **yi > 0.0)
        .count();
    Ok(hits as f64 / fw.num_bits() as f64)
}

/// Outcome of a bottom-model verification run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BottomVerification {
    pub theta_b: f64,
    pub decision: bool,
    /// Accuracy on the untouched remainder of the test set (stealth check).
    pub clean_acc: f64,
    pub n_triggered: usize,
    pub n_clean: usize,
}

/// Verifies a client's backdoor watermark against a suspect bottom model:
/// stamps the trigger on a `rho` fraction of the eligible test samples
/// (samples whose true label already equals the target class are excluded),
/// classifies them through top(bottom(.)), and reports the target-class rate.
pub fn verify_bottom(
    bottom_sus: &Model,
    top: &Model,
    trig: &TriggerPattern,
    test: &LabeledDataset,
    rho: f64,
    tau: f64,
    seed_v: u64,
) -> Result<BottomVerification> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must lie in [0,1], got {rho}")));
    }
    let eligible: Vec<usize> = (0..test.len())
        .filter(|&i| test.labels()[i] != trig.target_class)
        .collect();
    let count = (((rho * eligible.len() as f64) + 0.5).floor() as usize).min(eligible.len());
    if count == 0 {
        return Err(Error::Verification(
            "triggered subset is empty; raise rho or enlarge the test set".into(),
        ));
    }
    let mut order = eligible;
    let mut rng = seed::rng(seed_v, &[seed::tag::VERIFY, trig.owner_id as u64]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let chosen = &order[..count];
    let chosen_set: std::collections::HashSet<usize> = chosen.iter().copied().collect();

    // Triggered subset.
    let [c, h, w] = test.sample_shape();
    let mut data = Vec::with_capacity(count * c * h * w);
    for &i in chosen {
        let stamped = apply_trigger(&test.sample(i), trig)?;
        data.extend_from_slice(stamped.data());
    }
    let stamped = Tensor::new(vec![count, c, h, w], data)?;
    let logits = top.infer(&bottom_sus.infer(&stamped)?)?;
    let preds = crate::loss::predictions(&logits);
    let hits = preds.iter().filter(|&&p| p == trig.target_class).count();
    let theta_b = hits as f64 / count as f64;

    // Clean remainder (stealth check).
    let clean_idx: Vec<usize> = (0..test.len()).filter(|i| !chosen_set.contains(i)).collect();
    let clean_acc = if clean_idx.is_empty() {
        0.0
    } else {
        let (x, y) = test.batch(&clean_idx);
        let logits = top.infer(&bottom_sus.infer(&x)?)?;
        crate::loss::accuracy(&logits, &y)
    };

    Ok(BottomVerification {
        theta_b,
        decision: theta_b >= tau,
        clean_acc,
        n_triggered: count,
        n_clean: clean_idx.len(),
    })
}

/// JSON-facing verification report with fixed key names
/// (`theta_F`, `theta_B`, `tau`, `decision`, `n_triggered`).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VerificationReport {
    #[serde(rename = "theta_F")]
    pub theta_f: f64,
    #[serde(rename = "theta_B")]
    pub theta_b: Vec<f64>,
    pub tau: f64,
    pub decision: Vec<bool>,
    pub n_triggered: Vec<usize>,
}

impl VerificationReport {
    pub fn assemble(theta_f: f64, per_client: &[BottomVerification], tau: f64) -> Self {
        VerificationReport {
            theta_f,
            theta_b: per_client.iter().map(|v| v.theta_b).collect(),
            tau,
            decision: per_client.iter().map(|v| v.decision).collect(),
            n_triggered: per_client.iter().map(|v| v.n_triggered).collect(),
        }
    }
}

/// One row of a free-rider audit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AuditEntry {
    pub client_id: u32,
    pub declared_class: usize,
    pub theta_b: f64,
    /// Rate at which the *clean* probes already land in the declared class.
    pub clean_target_rate: f64,
    pub pass: bool,
}

/// Audits participation claims: each client disclosed a trigger and a declared
/// target class. The claim passes when stamped probes reach the declared class
/// at rate >= tau while the same clean probes do not.
pub fn free_rider_audit(
    claims: &[(TriggerPattern, usize)],
    pair: &SplitModelPair,
    probe: &LabeledDataset,
    tau: f64,
    seed_v: u64,
) -> Result<Vec<AuditEntry>> {
    let mut out = Vec::with_capacity(claims.len());
    for (trig, declared) in claims {
        let eligible: Vec<usize> = (0..probe.len())
            .filter(|&i| probe.labels()[i] != *declared)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Verification("no eligible probe samples".into()));
        }
        let _ = seed_v; // probes are used in full; kept for interface stability
        let [c, h, w] = probe.sample_shape();
        let mut data = Vec::with_capacity(eligible.len() * c * h * w);
        for &i in &eligible {
            let stamped = apply_trigger(&probe.sample(i), trig)?;
            data.extend_from_slice(stamped.data());
        }
        let stamped = Tensor::new(vec![eligible.len(), c, h, w], data)?;
        let preds = crate::loss::predictions(&pair.infer(&stamped)?);
        let theta_b =
            preds.iter().filter(|&&p| p == *declared).count() as f64 / eligible.len() as f64;

        let (cx, _) = probe.batch(&eligible);
        let clean_preds = crate::loss::predictions(&pair.infer(&cx)?);
        let clean_target_rate =
            clean_preds.iter().filter(|&&p| p == *declared).count() as f64 / eligible.len() as f64;

        out.push(AuditEntry {
            client_id: trig.owner_id,
            declared_class: *declared,
            theta_b,
            clean_target_rate,
            pass: theta_b >= tau && clean_target_rate < tau,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Layer;

    fn top_with_scales(scales: &[f64]) -> Model {
        let mut layers = vec![Layer::scalenorm(scales.len())];
        if let Layer::ScaleNorm(s) = &mut layers[0] {
            s.gamma.data_mut().copy_from_slice(scales);
        }
        Model::new(vec![scales.len()], layers).unwrap()
    }

    #[test]
    fn generation_shape_and_determinism() {
        let top = top_with_scales(&[1.0; 16]);
        let a = gen_feature_wm(9, 32, &[0], &top, 0.1).unwrap();
        let b = gen_feature_wm(9, 32, &[0], &top, 0.1).unwrap();
        assert_eq!(a.matrix.shape(), &[16, 32]);
        assert_eq!(a.matrix.data(), b.matrix.data());
        assert_eq!(a.bits, b.bits);
        assert!(a.capacity_ok());
    }

    #[test]
    fn bit_balance_within_binomial_bound() {
        let top = top_with_scales(&[1.0; 64]);
        let fw = gen_feature_wm(123, 128, &[0], &top, 0.1).unwrap();
        let mean = fw.bits.iter().map(|&b| b as f64).sum::<f64>() / 128.0;
        assert!((mean - 0.5).abs() < 0.15, "bit mean {mean}");
    }

    #[test]
    fn non_scalenorm_target_is_config_error() {
        let mut rng = seed::rng(0, &[]);
        let top = Model::new(vec![4], vec![Layer::dense(4, 2, &mut rng)]).unwrap();
        assert!(matches!(
            gen_feature_wm(1, 8, &[0], &top, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn response_extracts_matrix_rows_on_basis_vectors() {
        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // e_1 selects row 1.
        let y = wm_response(&[0.0, 1.0, 0.0], &m).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
        let z = wm_response(&[0.0, 0.0, 0.0], &m).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn response_is_linear() {
        let mut rng = seed::rng(5, &[1]);
        let m = Tensor::from_rng(&[8, 6], &mut rng, |r| StandardNormal.sample(r));
        let w1: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = 2.5;
        let combo: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + y).collect();
        let lhs = wm_response(&combo, &m).unwrap();
        let y1 = wm_response(&w1, &m).unwrap();
        let y2 = wm_response(&w2, &m).unwrap();
        for i in 0..6 {
            assert!((lhs[i] - (a * y1[i] + y2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn hinge_terms_match_the_definition() {
        // Single coordinate, single bit: y = w * m.
        let m = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        // Margin satisfied: s=+1, y=2 -> 0.
        let (l, g) = wm_loss(&[2.0], &m, &[1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0]);
        // Inside the margin: s=+1, y=0.5 -> 0.5 with gradient -s*m.
        let (l, g) = wm_loss(&[0.5], &m, &[1.0]).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g, vec![-1.0]);
    }

    #[test]
    fn hinge_gradient_matches_finite_differences_off_hinge() {
        let mut rng = seed::rng(17, &[2]);
        let m = Tensor::from_rng(&[10, 7], &mut rng, |r| StandardNormal.sample(r));
        let signs: Vec<f64> = (0..7).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let w: Vec<f64> = (0..10).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (_, grad) = wm_loss(&w, &m, &signs).unwrap();
        let eps = 1e-6;
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += eps;
            let mut wm_ = w.clone();
            wm_[j] -= eps;
            let (lp, _) = wm_loss(&wp, &m, &signs).unwrap();
            let (lm, _) = wm_loss(&wm_, &m, &signs).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "coordinate {j}: analytic {} numeric {numeric}", grad[j]);
        }
    }

    #[test]
    fn verify_top_counts_sign_agreements() {
        // d=4 identity-ish matrix, so y = w directly.
        let mut m = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            m.data_mut()[i * 4 + i] = 1.0;
        }
        let fw = FeatureWatermark::new(m, vec![1, 1, 1, 1], vec![0], 0.0, 0).unwrap();
        let top = top_with_scales(&[1.0, 1.0, -1.0, 1.0]);
        let theta = verify_top(&top, &fw).unwrap();
        assert_eq!(theta, 0.75);

        let all_good = top_with_scales(&[1.0, 2.0, 3.0, 0.5]);
        assert_eq!(verify_top(&all_good, &fw).unwrap(), 1.0);
    }

    #[test]
    fn random_scales_sit_at_chance_level() {
        let mut rng = seed::rng(31, &[4]);
        let scales: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let top = top_with_scales(&scales);
        let fw = gen_feature_wm(55, 1000, &[0], &top, 0.0).unwrap();
        let theta = verify_top(&top, &fw).unwrap();
        assert!((0.45..=0.55).contains(&theta), "chance theta_F was {theta}");
    }

    #[test]
    fn zero_loss_implies_full_detection() {
        let mut rng = seed::rng(77, &[6]);
        let top = top_with_scales(&(0..32).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let mut fw = gen_feature_wm(78, 16, &[0], &top, 0.1).unwrap();
        // Drive the hinge to zero with plain gradient steps.
        let mut top = top;
        for _ in 0..500 {
            fw.alpha = 1.0;
            let loss = fw.apply_step(&mut top, 0.05).unwrap();
            if loss == 0.0 {
                break;
            }
        }
        let w = fw.extract_scales(&top).unwrap();
        let (loss, _) = wm_loss(&w, &fw.matrix, &fw.signs()).unwrap();
        assert_eq!(loss, 0.0, "hinge failed to converge");
        assert_eq!(verify_top(&top, &fw).unwrap(), 1.0);
    }

    #[test]
    fn theta_f_is_scale_invariant() {
        let mut rng = seed::rng(91, &[8]);
        let scales: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fw = gen_feature_wm(92, 48, &[0], &top_with_scales(&scales), 0.0).unwrap();
        let t1 = verify_top(&top_with_scales(&scales), &fw).unwrap();
        let doubled: Vec<f64> = scales.iter().map(|v| v * 7.5).collect();
        let t2 = verify_top(&top_with_scales(&doubled), &fw).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn smw1_roundtrip() {
        let top = top_with_scales(&[1.0; 20]);
        let fw = gen_feature_wm(13, 37, &[0], &top, 0.25).unwrap();
        let back = FeatureWatermark::from_bytes(&fw.to_bytes()).unwrap();
        assert_eq!(back.matrix.data(), fw.matrix.data());
        assert_eq!(back.bits, fw.bits);
        assert_eq!(back.target_layer_ids, fw.target_layer_ids);
        assert_eq!(back.seed, fw.seed);
        assert!((back.alpha - 0.25).abs() < 1e-6);
    }

    #[test]
    fn signs_are_affine_image_of_bits() {
        let top = top_with_scales(&[1.0; 8]);
        let fw = gen_feature_wm(5, 16, &[0], &top, 0.0).unwrap();
        for (b, s) in fw.bits.iter().zip(fw.signs()) {
            assert_eq!(s, 2.0 * *b as f64 - 1.0);
        }
    }
}
