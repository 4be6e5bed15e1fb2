//! Client trigger patterns and dataset poisoning.
//!
//! A trigger is a per-client secret: a small binary mask, a patch pattern,
//! and a target class. Stamping the trigger onto a sample and relabeling it
//! to the target class turns the sample into a backdoor carrier. The mask
//! support is capped at 5% of the pixels so stamped samples blend in with
//! clean ones.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;

/// Fraction of the image a trigger mask may cover.
pub const MAX_SUPPORT: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct TriggerPattern {
    /// Binary mask over (h, w); broadcast over channels when stamping.
    pub mask: Tensor,
    /// Replacement values over (c, h, w), in [0,1].
    pub pattern: Tensor,
    pub target_class: usize,
    pub owner_id: u32,
    pub seed: u64,
}

impl TriggerPattern {
    pub fn new(
        mask: Tensor,
        pattern: Tensor,
        target_class: usize,
        owner_id: u32,
        seed: u64,
        num_classes: usize,
    ) -> Result<Self> {
        if mask.shape().len() != 2 || pattern.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "trigger expects mask (h, w) and pattern (c, h, w), got {:?} / {:?}",
                mask.shape(),
                pattern.shape()
            )));
        }
        if pattern.shape()[1..] != *mask.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} and pattern {:?} disagree on (h, w)",
                mask.shape(),
                pattern.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("trigger mask must be binary".into()));
        }
        if pattern.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("trigger pattern values must lie in [0,1]".into()));
        }
        let support: f64 = mask.data().iter().sum();
        let budget = MAX_SUPPORT * mask.len() as f64;
        if support > budget {
            return Err(Error::Data(format!(
                "trigger support {support} exceeds the stealthiness budget {budget:.1}"
            )));
        }
        if target_class >= num_classes {
            return Err(Error::Data(format!(
                "target class {target_class} out of range (num_classes={num_classes})"
            )));
        }
        Ok(TriggerPattern {
            mask,
            pattern,
            target_class,
            owner_id,
            seed,
        })
    }

    /// Number of masked pixels.
    pub fn support(&self) -> usize {
        self.mask.data().iter().map(|&v| v as usize).sum()
    }

    /// Generates the owner's trigger: a `patch`x`patch` patch at the given
    /// cell origin with a seeded contrast-balanced binary pattern (roughly
    /// half the pixels lit, so the patch stands out against any smooth
    /// background).
    pub fn generate_at(
        owner_id: u32,
        num_classes: usize,
        dims: [usize; 3],
        patch: usize,
        origin: (usize, usize),
        seed_v: u64,
    ) -> Result<Self> {
        let [c, h, w] = dims;
        let (y0, x0) = origin;
        if y0 + patch > h || x0 + patch > w {
            return Err(Error::Config(format!(
                "trigger patch {patch} at ({y0},{x0}) exceeds image {h}x{w}"
            )));
        }
        let mut rng = seed::rng(seed_v, &[seed::tag::TRIGGER, owner_id as u64]);
        let mut mask = Tensor::zeros(&[h, w]);
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
        let n_px = c * patch * patch;
        let (lo, hi) = ((2 * n_px).div_ceil(5), (3 * n_px) / 5);
        let mut pattern = Tensor::zeros(&[c, h, w]);
        loop {
            let mut lit = 0usize;
            for ci in 0..c {
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        let v = u8::from(rng.gen_bool(0.5));
                        lit += v as usize;
                        pattern.data_mut()[(ci * h + y) * w + x] = v as f64;
                    }
                }
            }
            if (lo..=hi).contains(&lit) {
                break;
            }
        }
        let target_class = rng.gen_range(0..num_classes);
        TriggerPattern::new(mask, pattern, target_class, owner_id, seed_v, num_classes)
    }

    /// Generates the owner's trigger at a pseudorandom grid cell.
    pub fn generate(
        owner_id: u32,
        num_classes: usize,
        dims: [usize; 3],
        patch: usize,
        seed_v: u64,
    ) -> Result<Self> {
        let cells = grid_cells(dims, patch)?;
        let mut rng = seed::rng(seed_v, &[seed::tag::TRIGGER, owner_id as u64, 7]);
        let origin = cells[rng.gen_range(0..cells.len())];
        TriggerPattern::generate_at(owner_id, num_classes, dims, patch, origin, seed_v)
    }

    /// Generates one trigger per client with pairwise-distinct secrets.
    /// Patch locations are drawn without replacement from a disjoint grid of
    /// `patch`x`patch` cells (seeded order), so clients never contend for the
    /// same pixels while enough cells last; patterns are distinct throughout.
    pub fn generate_distinct(
        clients: usize,
        num_classes: usize,
        dims: [usize; 3],
        patch: usize,
        seed_v: u64,
    ) -> Result<Vec<Self>> {
        let mut cells = grid_cells(dims, patch)?;
        let mut rng = seed::rng(seed_v, &[seed::tag::TRIGGER]);
        for i in (1..cells.len()).rev() {
            let j = rng.gen_range(0..=i);
            cells.swap(i, j);
        }
        let mut out: Vec<TriggerPattern> = Vec::with_capacity(clients);
        for k in 0..clients {
            let origin = cells[k % cells.len()];
            let mut attempt = 0u64;
            loop {
                let sub = seed::derive(seed_v, &[seed::tag::TRIGGER, attempt]);
                let cand =
                    TriggerPattern::generate_at(k as u32, num_classes, dims, patch, origin, sub)?;
                let clash = out.iter().any(|t| {
                    t.mask.data() == cand.mask.data() && t.pattern.data() == cand.pattern.data()
                });
                if !clash {
                    out.push(cand);
                    break;
                }
                attempt += 1;
                if attempt > 10_000 {
                    return Err(Error::Config(
                        "could not generate distinct triggers; widen the patch".into(),
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// Disjoint patch-aligned cell origins covering the image.
fn grid_cells(dims: [usize; 3], patch: usize) -> Result<Vec<(usize, usize)>> {
    let [_, h, w] = dims;
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Config(format!(
            "trigger patch {patch} does not fit a {h}x{w} image"
        )));
    }
    let mut cells = Vec::new();
    for gy in 0..h / patch {
        for gx in 0..w / patch {
            cells.push((gy * patch, gx * patch));
        }
    }
    Ok(cells)
}

/// Stamps a trigger onto one (c, h, w) sample:
/// `out = (1 - mask) * sample + mask * pattern`, mask broadcast over channels.
pub fn apply_trigger(sample: &Tensor, trig: &TriggerPattern) -> Result<Tensor> {
    if sample.shape() != trig.pattern.shape() {
        return Err(Error::Shape(format!(
            "sample {:?} does not match trigger pattern {:?}",
            sample.shape(),
            trig.pattern.shape()
        )));
    }
    let (c, hw) = (sample.shape()[0], trig.mask.len());
    let mut out = sample.clone();
    let (md, pd) = (trig.mask.data(), trig.pattern.data());
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..hw {
            let m = md[i];
            od[ci * hw + i] = (1.0 - m) * od[ci * hw + i] + m * pd[ci * hw + i];
        }
    }
    Ok(out)
}

/// Poisons `rho` of the dataset (nearest integer, ties up): selected samples
/// are stamped with the trigger and relabeled to its target class. Returns
/// the poisoned dataset and the sorted index set for audit.
pub fn poison(
    ds: &LabeledDataset,
    trig: &TriggerPattern,
    rho: f64,
    seed_v: u64,
) -> Result<(LabeledDataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must lie in [0,1], got {rho}")));
    }
    let n = ds.len();
    let count = ((rho * n as f64) + 0.5).floor() as usize;
    let count = count.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed_v, &[seed::tag::POISON, trig.owner_id as u64]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut chosen: Vec<usize> = order[..count].to_vec();
    chosen.sort_unstable();

    let mut out = ds.clone();
    for &i in &chosen {
        let stamped = apply_trigger(&ds.sample(i), trig)?;
        out.set_sample(i, &stamped, trig.target_class)?;
    }
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, DatasetSpec};

    fn spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            samples_per_class: 50,
            channels: 1,
            height: 16,
            width: 16,
            class_separation: 1.0,
            noise: 0.08,
            seed: 3,
        }
    }

    fn sample16() -> Tensor {
        let mut rng = seed::rng(5, &[99]);
        Tensor::from_rng(&[1, 16, 16], &mut rng, |r| r.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_mask_is_identity_and_full_patch_replaces() {
        let s = sample16();
        let trig = TriggerPattern::new(
            Tensor::zeros(&[16, 16]),
            Tensor::zeros(&[1, 16, 16]),
            0,
            0,
            0,
            4,
        )
        .unwrap();
        let out = apply_trigger(&s, &trig).unwrap();
        assert_eq!(out.data(), s.data());
    }

    #[test]
    fn corner_patch_changes_exactly_nine_values() {
        let s = sample16();
        let trig = TriggerPattern::generate(0, 4, [1, 16, 16], 3, 42).unwrap();
        let out = apply_trigger(&s, &trig).unwrap();
        let diffs = out
            .data()
            .iter()
            .zip(s.data())
            .filter(|(a, b)| a != b)
            .count();
        // 9 masked pixels per channel; a masked pixel keeps its value only if
        // the pattern happens to equal the sample there (measure zero here).
        assert_eq!(diffs, 9);
        assert_eq!(trig.support(), 9);
    }

    #[test]
    fn apply_trigger_is_idempotent() {
        let s = sample16();
        let trig = TriggerPattern::generate(1, 4, [1, 16, 16], 3, 13).unwrap();
        let once = apply_trigger(&s, &trig).unwrap();
        let twice = apply_trigger(&once, &trig).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn support_budget_is_enforced() {
        // An 8x8 patch on 16x16 is 25% of the pixels: rejected.
        let mut mask = Tensor::zeros(&[16, 16]);
        for y in 0..8 {
            for x in 0..8 {
                mask.data_mut()[y * 16 + x] = 1.0;
            }
        }
        let err = TriggerPattern::new(mask, Tensor::zeros(&[1, 16, 16]), 0, 0, 0, 4);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn poison_counts_and_determinism() {
        let ds = gen_synthetic(&spec()).unwrap();
        let trig = TriggerPattern::generate(0, 4, [1, 16, 16], 3, 50).unwrap();

        let (unchanged, idx) = poison(&ds, &trig, 0.0, 9).unwrap();
        assert!(idx.is_empty());
        assert_eq!(unchanged.samples().data(), ds.samples().data());

        let (poisoned, idx) = poison(&ds, &trig, 0.1, 9).unwrap();
        assert_eq!(idx.len(), 20);
        assert_eq!(poisoned.len(), ds.len());
        for &i in &idx {
            assert_eq!(poisoned.labels()[i], trig.target_class);
        }
        // Untouched rows are bitwise identical.
        let idx_set: std::collections::HashSet<_> = idx.iter().copied().collect();
        let sz: usize = ds.sample_shape().iter().product();
        for i in 0..ds.len() {
            if !idx_set.contains(&i) {
                assert_eq!(
                    poisoned.samples().data()[i * sz..(i + 1) * sz],
                    ds.samples().data()[i * sz..(i + 1) * sz]
                );
                assert_eq!(poisoned.labels()[i], ds.labels()[i]);
            }
        }

        let (_, idx2) = poison(&ds, &trig, 0.1, 9).unwrap();
        assert_eq!(idx, idx2);
    }

    #[test]
    fn rho_rounding_is_nearest_ties_up() {
        let ds = gen_synthetic(&spec()).unwrap(); // 200 samples
        let trig = TriggerPattern::generate(0, 4, [1, 16, 16], 3, 50).unwrap();
        // 0.0024 * 200 = 0.48 -> 0; 0.0025 * 200 = 0.5 -> 1 (ties up)
        let (_, a) = poison(&ds, &trig, 0.0024, 1).unwrap();
        let (_, b) = poison(&ds, &trig, 0.0025, 1).unwrap();
        assert_eq!(a.len(), 0);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn distinct_triggers_for_many_clients() {
        let trigs = TriggerPattern::generate_distinct(10, 4, [1, 16, 16], 3, 77).unwrap();
        assert_eq!(trigs.len(), 10);
        for i in 0..trigs.len() {
            for j in i + 1..trigs.len() {
                let same = trigs[i].mask.data() == trigs[j].mask.data()
                    && trigs[i].pattern.data() == trigs[j].pattern.data();
                assert!(!same, "clients {i} and {j} share a trigger");
            }
        }
        for t in &trigs {
            assert!(t.support() as f64 <= MAX_SUPPORT * 256.0);
        }
    }
}
