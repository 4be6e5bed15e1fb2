// Temporary tuning probe; not part of the deliverable.
use splitmark_core::attack::{self, AttackConfig, ReversedTrigger};
use splitmark_core::config::{ExperimentConfig, Stage};
use splitmark_core::harness;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "attacks".into());
    match which.as_str() {
        "attacks" => attacks(),
        "k10" => k10(),
        "dp" => dp(),
        "freeriders" => freeriders(),
        "nc" => nc_probe(),
        "diag" => diag(),
        "frontier" => frontier(),
        "k10diag" => k10diag(),
        _ => panic!("unknown probe"),
    }
}

fn frontier() {
    // Type II claim strength and criterion-11 outcomes vs NC step size.
    let mut cfg = ExperimentConfig::default();
    cfg.clients = 5;
    cfg.stages = vec![Stage::Dual];
    cfg.seeds = vec![1];
    let (train_set, test, attacker) = harness::gen_splits(&cfg, 1).unwrap();
    let shards = splitmark_core::data::partition(&train_set, 5, 1).unwrap();
    let triggers = splitmark_core::TriggerPattern::generate_distinct(5, 4, [1, 16, 16], 3, 1).unwrap();
    let mut data = vec![];
    for (k, shard) in shards.iter().enumerate() {
        if k < 3 {
            let (p, _) = splitmark_core::trigger::poison(shard, &triggers[k], cfg.rho, 1).unwrap();
            data.push(p);
        } else {
            data.push(shard.clone());
        }
    }
    let pair0 = harness::initial_pair(&cfg, 1).unwrap();
    let ids = splitmark_core::arch::top_scalenorm_ids(2).unwrap();
    let fw = splitmark_core::watermark::gen_feature_wm(1, 128, &ids, &pair0.top, 0.1).unwrap();
    let mut tcfg = cfg.train_config(Stage::Dual, 1);
    tcfg.passive_clients = vec![3];
    let (pair, _) = splitmark_core::sfl::train(&tcfg, pair0, &data, Some(&fw), None).unwrap();
    let btrigs = &triggers[..3];

    for step in [0.01, 0.02, 0.03, 0.05] {
        let acfg = AttackConfig { seed: 1, nc_step: step, ..cfg.attack.clone() };
        // Type II: best class by asr on his own shard, condensed claim.
        let mut best: Option<ReversedTrigger> = None;
        let mut asrs = vec![];
        for class in 0..4 {
            let t = attack::reverse_trigger(&pair, class, &shards[4], &acfg).unwrap();
            asrs.push((class, t.asr));
            if best.as_ref().map_or(true, |b| t.asr > b.asr) {
                best = Some(t);
            }
        }
        let claim = best.unwrap().to_claim(4).unwrap();
        let audit = splitmark_core::watermark::free_rider_audit(
            &[(claim.clone(), claim.target_class)], &pair, &test, cfg.tau, 1).unwrap();
        // Criterion 11 path with attacker split as NC probe.
        let mut reversed = vec![];
        for class in 0..4 {
            reversed.push(attack::reverse_trigger(&pair, class, &attacker, &acfg).unwrap());
        }
        let un = attack::unlearn(&pair, &reversed, &attacker, 5, 0.05, 25, 1).unwrap();
        let mut tb = vec![];
        for trig in btrigs {
            let v = splitmark_core::watermark::verify_bottom(&un.bottom, &un.top, trig, &test, 1.0, 0.8, 1).unwrap();
            tb.push(v.theta_b);
        }
        let truth = ReversedTrigger::from_pattern(&btrigs[0]);
        let unt = attack::unlearn(&pair, &[truth], &attacker, 5, 0.05, 25, 1).unwrap();
        let vt = splitmark_core::watermark::verify_bottom(&unt.bottom, &unt.top, &btrigs[0], &test, 1.0, 0.8, 1).unwrap();
        println!(
            "step {:5}: asrs {:?} typeII_theta {:.3} | unlearn theta_B {:?} | truth {:.3}",
            step, asrs, audit[0].theta_b, tb, vt.theta_b
        );
    }
}

fn k10diag() {
    for rounds in [60u32, 120, 240] {
        for seed in [1u64, 2] {
            let mut cfg = ExperimentConfig::default();
            cfg.clients = 10;
            cfg.stages = vec![Stage::Dual];
            cfg.rounds = rounds;
            cfg.seeds = vec![seed];
            let run = harness::run_seed(&cfg, seed).unwrap();
            let row = &run.rows[0];
            println!(
                "rounds {:3} seed {seed}: acc {:.3} theta_F {:.3} theta_B_min {:.3} mean {:.3}",
                rounds, row.acc_main, row.theta_f, row.theta_b_min, row.theta_b_mean
            );
        }
    }
}

fn diag() {
    // Where does the forged claim's support land relative to true triggers?
    let mut cfg = ExperimentConfig::default();
    cfg.clients = 5;
    cfg.stages = vec![Stage::Dual];
    cfg.seeds = vec![1];
    let (train_set, _test, _) = harness::gen_splits(&cfg, 1).unwrap();
    let shards = splitmark_core::data::partition(&train_set, 5, 1).unwrap();
    let triggers = splitmark_core::TriggerPattern::generate_distinct(5, 4, [1, 16, 16], 3, 1).unwrap();
    for t in &triggers {
        let support: Vec<usize> = t.mask.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        let pat: Vec<f64> = support.iter().map(|&i| t.pattern.data()[i]).collect();
        println!(
            "true trig owner {} target {} corner_px {:?} pattern {:?}",
            t.owner_id, t.target_class, &support[..3], pat
        );
    }
    // Re-run the dual training as in run_free_riders (benign 0..=2 poisoned).
    let mut data = vec![];
    for (k, shard) in shards.iter().enumerate() {
        if k < 3 {
            let (p, _) = splitmark_core::trigger::poison(shard, &triggers[k], cfg.rho, 1).unwrap();
            data.push(p);
        } else {
            data.push(shard.clone());
        }
    }
    let pair0 = harness::initial_pair(&cfg, 1).unwrap();
    let ids = splitmark_core::arch::top_scalenorm_ids(2).unwrap();
    let fw = splitmark_core::watermark::gen_feature_wm(1, 128, &ids, &pair0.top, 0.1).unwrap();
    let mut tcfg = cfg.train_config(Stage::Dual, 1);
    tcfg.passive_clients = vec![3];
    let (pair, _) = splitmark_core::sfl::train(&tcfg, pair0, &data, Some(&fw), None).unwrap();

    let acfg = AttackConfig { seed: 1, ..cfg.attack.clone() };
    for class in 0..4 {
        let t = attack::reverse_trigger(&pair, class, &shards[4], &acfg).unwrap();
        let claim = t.to_claim(4).unwrap();
        let support: Vec<usize> = claim.mask.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        println!("forged class {class}: soft_asr {:.3} l1 {:.1} claim_px {:?}", t.asr, t.mask_l1, support);
    }
}

fn corner_mass(mask: &splitmark_core::Tensor) -> f64 {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let total: f64 = mask.data().iter().sum();
    let mut corners = 0.0;
    for y in 0..h {
        for x in 0..w {
            let in_corner = (y < 3 || y >= h - 3) && (x < 3 || x >= w - 3);
            if in_corner {
                corners += mask.data()[y * w + x];
            }
        }
    }
    corners / total.max(1e-9)
}

fn nc_probe() {
    let mut cfg = ExperimentConfig::default();
    cfg.stages = vec![Stage::Dual];
    cfg.seeds = vec![1];
    let run = harness::run_seed(&cfg, 1).unwrap();
    let pair = &run.pairs[0].1;
    println!("true trigger targets: {:?}", run.triggers.iter().map(|t| t.target_class).collect::<Vec<_>>());

    for step in [0.05, 0.1, 0.3] {
        let acfg = AttackConfig { seed: 1, nc_step: step, ..cfg.attack.clone() };
        let mut reversed = vec![];
        for class in 0..4 {
            let t = attack::reverse_trigger(pair, class, &run.attacker, &acfg).unwrap();
            println!(
                "step {:4} class {} l1 {:6.2} asr {:.3} corner_mass {:.3}",
                step, class, t.mask_l1, t.asr, corner_mass(&t.mask)
            );
            reversed.push(t);
        }
        for (ep, lr, frac_label) in [(5u32, 0.05, "strong"), (3, 0.02, "mild"), (2, 0.01, "gentle")] {
            let un = attack::unlearn(pair, &reversed, &run.attacker, ep, lr, 25, 1).unwrap();
            let row = harness::measure_pair(&cfg, 1, "x", "", "", &un, &run.fw, &run.triggers, &run.test, 0).unwrap();
            let truth = ReversedTrigger::from_pattern(&run.triggers[0]);
            let unt = attack::unlearn(pair, &[truth], &run.attacker, ep, lr, 25, 1).unwrap();
            let rowt = harness::measure_pair(&cfg, 1, "x", "", "", &unt, &run.fw, &run.triggers, &run.test, 0).unwrap();
            println!(
                "  unlearn {:6} (ep {} lr {}): forged theta_B min {:.3} mean {:.3} thetaF {:.2} | truth client0 {:.3}",
                frac_label, ep, lr, row.theta_b_min, row.theta_b_mean, row.theta_f, rowt.theta_b[0]
            );
        }
    }
}

fn attacks() {
    let mut cfg = ExperimentConfig::default();
    cfg.stages = vec![Stage::Dual];
    cfg.seeds = vec![1];
    let run = harness::run_seed(&cfg, 1).unwrap();
    let pair = &run.pairs[0].1;
    println!("base: {:?}", (&run.rows[0].acc_main, &run.rows[0].theta_f, &run.rows[0].theta_b));

    let t0 = Instant::now();
    let (rows, nc) = harness::attack_grid(&cfg, 1, pair, &run.fw, &run.triggers, &run.test, &run.attacker).unwrap();
    println!("attack grid took {:?}", t0.elapsed());
    for row in &rows {
        println!(
            "{:22} {:>6} acc {:.4} theta_F {:.4} theta_B_min {:.4} mean {:.4}",
            row.stage, row.attack_param, row.acc_main, row.theta_f, row.theta_b_min, row.theta_b_mean
        );
    }
    for o in &nc {
        println!(
            "nc class {} mask_l1 {:.2} asr {:.3} idx {:.2} flagged {}",
            o.class, o.mask_l1, o.asr, o.anomaly_index, o.flagged
        );
    }
    // True-trigger unlearning oracle.
    let truth = ReversedTrigger::from_pattern(&run.triggers[0]);
    let acfg = AttackConfig { seed: 1, ..cfg.attack.clone() };
    let un = attack::unlearn(pair, &[truth], &run.attacker, acfg.unlearn_epochs, acfg.unlearn_lr, acfg.batch_size, 1).unwrap();
    let row = harness::measure_pair(&cfg, 1, "truth-unlearn", "", "", &un, &run.fw, &run.triggers, &run.test, 0).unwrap();
    println!("truth-unlearn: theta_B {:?} (client0 should drop >= 30pp)", row.theta_b);
}

fn k10() {
    let mut cfg = ExperimentConfig::default();
    cfg.clients = 10;
    cfg.stages = vec![Stage::Dual];
    cfg.seeds = vec![1];
    let t0 = Instant::now();
    let run = harness::run_seed(&cfg, 1).unwrap();
    println!("k10 took {:?}", t0.elapsed());
    let row = &run.rows[0];
    println!("k10: acc {:.4} theta_F {:.4} theta_B {:?}", row.acc_main, row.theta_f, row.theta_b);
}

fn dp() {
    for sigma in [0.1, 0.3, 0.5, 1.0] {
        let mut cfg = ExperimentConfig::default();
        cfg.stages = vec![Stage::Dual];
        cfg.seeds = vec![1];
        cfg.dp_sigma = sigma;
        let run = harness::run_seed(&cfg, 1).unwrap();
        let row = &run.rows[0];
        println!(
            "sigma {:4}: acc {:.4} theta_F {:.4} theta_B_min {:.4}",
            sigma, row.acc_main, row.theta_f, row.theta_b_min
        );
    }
}

fn freeriders() {
    let mut cfg = ExperimentConfig::default();
    cfg.clients = 5;
    cfg.stages = vec![Stage::Dual];
    cfg.seeds = vec![1];
    let t0 = Instant::now();
    let rep = harness::run_free_riders(&cfg).unwrap();
    println!("freeriders took {:?}", t0.elapsed());
    for (role, e) in rep.roles.iter().zip(&rep.entries) {
        println!(
            "{:?} client {} declared {} theta_b {:.4} clean_rate {:.4} pass {}",
            role, e.client_id, e.declared_class, e.theta_b, e.clean_target_rate, e.pass
        );
    }
}
