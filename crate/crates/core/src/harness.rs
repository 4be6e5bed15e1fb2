//! Experiment orchestration: per-seed pipelines over the configured training
//! stages, watermark verification, the attack grid, and metrics emission.

use crate::arch;
use crate::attack::{self, AttackConfig, ReversedTrigger};
use crate::config::{ExperimentConfig, Stage};
use crate::data::{gen_synthetic, partition, LabeledDataset};
use crate::error::{Error, Result};
use crate::loss::softmax_cross_entropy;
use crate::sfl::{train, RoundRecord, SplitModelPair};
use crate::trigger::{poison, TriggerPattern};
use crate::watermark::{gen_feature_wm, verify_bottom, verify_top, FeatureWatermark};
use std::path::Path;
use std::time::Instant;

/// One verification measurement; primary stages and attack cells share the
/// same row shape.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub stage: String,
    pub round: u32,
    pub acc_main: f64,
    pub theta_f: f64,
    pub theta_b: Vec<f64>,
    pub theta_b_mean: f64,
    pub theta_b_min: f64,
    pub loss_main: f64,
    pub loss_wm: f64,
    pub attack: String,
    pub attack_param: String,
    pub wall_ms: u64,
}

/// Per-round history of one training stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageHistory {
    pub seed: u64,
    pub stage: String,
    pub rounds: Vec<RoundRecord>,
}

/// Trigger recovery outcome for one class.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NcClassOutcome {
    pub class: usize,
    pub mask_l1: f64,
    pub asr: f64,
    pub anomaly_index: f64,
    pub flagged: bool,
}

/// Full experiment report; serializes losslessly to JSON.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub histories: Vec<StageHistory>,
    pub nc_outcomes: Vec<NcClassOutcome>,
    pub warnings: Vec<String>,
}

impl RunReport {
    /// Copy with wall times zeroed, for determinism comparisons.
    pub fn normalized(&self) -> RunReport {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.wall_ms = 0;
        }
        r
    }
}

/// Everything one seed produces, with models retained for follow-up attacks.
pub struct SeedRun {
    pub seed: u64,
    pub test: LabeledDataset,
    pub attacker: LabeledDataset,
    pub triggers: Vec<TriggerPattern>,
    pub fw: FeatureWatermark,
    pub pairs: Vec<(Stage, SplitModelPair)>,
    pub rows: Vec<MetricsRow>,
    pub histories: Vec<StageHistory>,
    pub warnings: Vec<String>,
}

/// Generates train/test/attacker splits with shared class templates: one
/// synthetic draw per class, cut positionally so the three sets are disjoint.
pub fn gen_splits(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let train_spc = cfg.dataset.samples_per_class;
    let test_spc = cfg.test_samples_per_class;
    let attacker_spc = (cfg.attacker_fraction * train_spc as f64).ceil() as usize;
    let mut spec = cfg.dataset.clone();
    spec.samples_per_class = train_spc + test_spc + attacker_spc;
    spec.seed = seed;
    let all = gen_synthetic(&spec)?;

    let total = spec.samples_per_class;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut attacker_idx = Vec::new();
    for class in 0..spec.num_classes {
        let base = class * total;
        train_idx.extend(base..base + train_spc);
        test_idx.extend(base + train_spc..base + train_spc + test_spc);
        attacker_idx.extend(base + train_spc + test_spc..base + total);
    }
    Ok((
        all.select(&train_idx),
        all.select(&test_idx),
        all.select(&attacker_idx),
    ))
}

/// Builds the initial split pair for this experiment seed.
pub fn initial_pair(cfg: &ExperimentConfig, seed: u64) -> Result<SplitModelPair> {
    let d = &cfg.dataset;
    let model = arch::reference_model(d.channels, d.height, d.width, d.num_classes, seed)?;
    SplitModelPair::split(model, arch::split_index_for_block(cfg.split_after)?)
}

/// Verifies both watermarks on a pair and assembles a metrics row. The
/// feature watermark is always checked against the same server secret, so
/// stages without it report its chance level.
#[allow(clippy::too_many_arguments)]
pub fn measure_pair(
    cfg: &ExperimentConfig,
    seed: u64,
    stage: &str,
    attack: &str,
    attack_param: &str,
    pair: &SplitModelPair,
    fw: &FeatureWatermark,
    triggers: &[TriggerPattern],
    test: &LabeledDataset,
    wall_ms: u64,
) -> Result<MetricsRow> {
    let theta_f = verify_top(&pair.top, fw)?;
    let mut theta_b = Vec::with_capacity(triggers.len());
    for trig in triggers {
        let v = verify_bottom(&pair.bottom, &pair.top, trig, test, cfg.verify_rho, cfg.tau, seed)?;
        theta_b.push(v.theta_b);
    }
    let acc_main = pair.accuracy_on(test)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, y) = test.batch(&all);
    let (loss_main, _) = softmax_cross_entropy(&pair.infer(&x)?, &y)?;
    let w = fw.extract_scales(&pair.top)?;
    let (loss_wm, _) = crate::watermark::wm_loss(&w, &fw.matrix, &fw.signs())?;
    let mean = theta_b.iter().sum::<f64>() / theta_b.len().max(1) as f64;
    let min = theta_b.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(MetricsRow {
        seed,
        stage: stage.to_string(),
        round: cfg.rounds.saturating_sub(1),
        acc_main,
        theta_f,
        theta_b_mean: mean,
        theta_b_min: if min.is_finite() { min } else { 0.0 },
        theta_b,
        loss_main,
        loss_wm,
        attack: attack.to_string(),
        attack_param: attack_param.to_string(),
        wall_ms,
    })
}

/// Runs every configured stage for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let (train_set, test, attacker) = gen_splits(cfg, seed)?;
    let shards = partition(&train_set, cfg.clients, seed)?;
    let dims = cfg.dataset.sample_shape();
    let triggers = TriggerPattern::generate_distinct(
        cfg.clients,
        cfg.dataset.num_classes,
        dims,
        cfg.trigger_patch,
        seed,
    )?;
    let mut poisoned = Vec::with_capacity(cfg.clients);
    for (k, shard) in shards.iter().enumerate() {
        let (p, _) = poison(shard, &triggers[k], cfg.rho, seed)?;
        poisoned.push(p);
    }

    let pair0 = initial_pair(cfg, seed)?;
    let target_ids = arch::top_scalenorm_ids(cfg.split_after)?;
    let fw = gen_feature_wm(seed, cfg.wm_bits, &target_ids, &pair0.top, cfg.alpha)?;
    let mut warnings = Vec::new();
    if !fw.capacity_ok() {
        warnings.push(format!(
            "signature length {} strains the scale capacity {} (want d >= N/4)",
            fw.num_bits(),
            fw.dim()
        ));
    }

    let mut run = SeedRun {
        seed,
        test,
        attacker,
        triggers,
        fw,
        pairs: Vec::new(),
        rows: Vec::new(),
        histories: Vec::new(),
        warnings,
    };

    for &stage in &cfg.stages {
        let data = if stage.client_wm() { &poisoned } else { &shards };
        let fwopt = stage.server_wm().then_some(&run.fw);
        let tcfg = cfg.train_config(stage, seed);
        let started = Instant::now();
        let (pair, rounds) = train(&tcfg, pair0.clone(), data, fwopt, Some(&run.test))?;
        let wall_ms = started.elapsed().as_millis() as u64;
        let row = measure_pair(
            cfg,
            seed,
            stage.as_str(),
            "",
            "",
            &pair,
            &run.fw,
            &run.triggers,
            &run.test,
            wall_ms,
        )?;
        run.rows.push(row);
        run.histories.push(StageHistory {
            seed,
            stage: stage.as_str().to_string(),
            rounds,
        });
        run.pairs.push((stage, pair));
    }
    Ok(run)
}

/// Applies the configured attack grid to a trained dual-watermark pair and
/// re-verifies after every cell.
pub fn attack_grid(
    cfg: &ExperimentConfig,
    seed: u64,
    pair: &SplitModelPair,
    fw: &FeatureWatermark,
    triggers: &[TriggerPattern],
    test: &LabeledDataset,
    attacker: &LabeledDataset,
) -> Result<(Vec<MetricsRow>, Vec<NcClassOutcome>)> {
    let mut rows = Vec::new();
    let acfg = AttackConfig {
        seed,
        ..cfg.attack.clone()
    };

    // Fine-tuning on the attacker's clean split.
    let started = Instant::now();
    let tuned = attack::finetune(
        pair,
        attacker,
        acfg.finetune_epochs,
        acfg.finetune_lr,
        acfg.batch_size,
        seed,
    )?;
    rows.push(measure_pair(
        cfg,
        seed,
        "post-attack:finetune",
        "finetune",
        &acfg.finetune_epochs.to_string(),
        &tuned,
        fw,
        triggers,
        test,
        started.elapsed().as_millis() as u64,
    )?);

    // Global magnitude pruning over the combined stolen model.
    for &rate in &cfg.prune_rates {
        let started = Instant::now();
        let mono = pair.to_monolithic()?;
        let pruned = SplitModelPair::split(attack::prune(&mono, rate)?, pair.split_index)?;
        rows.push(measure_pair(
            cfg,
            seed,
            "post-attack:prune",
            "prune",
            &format!("{rate}"),
            &pruned,
            fw,
            triggers,
            test,
            started.elapsed().as_millis() as u64,
        )?);
    }

    // Precision reduction.
    for &scheme in &cfg.quant_schemes {
        let started = Instant::now();
        let quantized = SplitModelPair {
            bottom: attack::quantize(&pair.bottom, scheme)?,
            top: attack::quantize(&pair.top, scheme)?,
            split_index: pair.split_index,
        };
        rows.push(measure_pair(
            cfg,
            seed,
            "post-attack:quantize",
            "quantize",
            &scheme.name(),
            &quantized,
            fw,
            triggers,
            test,
            started.elapsed().as_millis() as u64,
        )?);
    }

    // Trigger reverse-engineering, anomaly scoring, and unlearning.
    let started = Instant::now();
    let mut reversed: Vec<ReversedTrigger> = Vec::new();
    for class in 0..cfg.dataset.num_classes {
        reversed.push(attack::reverse_trigger(pair, class, attacker, &acfg)?);
    }
    let norms: Vec<f64> = reversed.iter().map(|t| t.mask_l1).collect();
    let anomalies = attack::anomaly_index(&norms, acfg.nc_anomaly_threshold)?;
    let nc_outcomes: Vec<NcClassOutcome> = reversed
        .iter()
        .zip(&anomalies)
        .map(|(t, &(idx, flagged))| NcClassOutcome {
            class: t.class,
            mask_l1: t.mask_l1,
            asr: t.asr,
            anomaly_index: idx,
            flagged,
        })
        .collect();
    let unlearned = attack::unlearn(
        pair,
        &reversed,
        attacker,
        acfg.unlearn_epochs,
        acfg.unlearn_lr,
        acfg.batch_size,
        seed,
    )?;
    rows.push(measure_pair(
        cfg,
        seed,
        "post-attack:nc-unlearn",
        "nc-unlearn",
        &acfg.nc_iterations.to_string(),
        &unlearned,
        fw,
        triggers,
        test,
        started.elapsed().as_millis() as u64,
    )?);

    Ok((rows, nc_outcomes))
}

/// Full experiment: every seed, every stage, plus the attack grid on each
/// seed's dual-watermark model when attacks are enabled.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::default();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        report.rows.extend(run.rows.iter().cloned());
        report.histories.extend(run.histories.iter().cloned());
        report.warnings.extend(run.warnings.iter().cloned());
        if cfg.attacks_enabled {
            let dual = run
                .pairs
                .iter()
                .find(|(s, _)| *s == Stage::Dual)
                .map(|(_, p)| p)
                .ok_or_else(|| {
                    Error::Config("attacks need the dual stage in the stage list".into())
                })?;
            let (rows, nc) = attack_grid(
                cfg,
                seed,
                dual,
                &run.fw,
                &run.triggers,
                &run.test,
                &run.attacker,
            )?;
            report.rows.extend(rows);
            report.nc_outcomes.extend(nc);
        }
    }
    Ok(report)
}

/// Role of a participant in the free-rider experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ClientRole {
    Benign,
    /// Contributes the unchanged global bottom, never poisons.
    PassiveFreeRider,
    /// Trains on clean data and forges a trigger for the audit.
    ActiveFreeRider,
}

/// Free-rider experiment outcome.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FreeRiderReport {
    pub roles: Vec<ClientRole>,
    pub entries: Vec<crate::watermark::AuditEntry>,
}

/// Trains a dual-watermark run where the last two clients are free-riders
/// (one passive, one active), then audits every participation claim. The
/// active free-rider reverse-engineers a trigger on its own clean shard and
/// submits the best candidate, condensed to a budget-compliant claim.
pub fn run_free_riders(cfg: &ExperimentConfig) -> Result<FreeRiderReport> {
    cfg.validate()?;
    if cfg.clients < 3 {
        return Err(Error::Config(
            "free-rider experiment needs at least 3 clients".into(),
        ));
    }
    let seed = cfg.seeds[0];
    let type1 = cfg.clients - 2;
    let type2 = cfg.clients - 1;
    let roles: Vec<ClientRole> = (0..cfg.clients)
        .map(|k| match k {
            k if k == type1 => ClientRole::PassiveFreeRider,
            k if k == type2 => ClientRole::ActiveFreeRider,
            _ => ClientRole::Benign,
        })
        .collect();

    let (train_set, test, _) = gen_splits(cfg, seed)?;
    let shards = partition(&train_set, cfg.clients, seed)?;
    let dims = cfg.dataset.sample_shape();
    let triggers = TriggerPattern::generate_distinct(
        cfg.clients,
        cfg.dataset.num_classes,
        dims,
        cfg.trigger_patch,
        seed,
    )?;
    let mut data = Vec::with_capacity(cfg.clients);
    for (k, shard) in shards.iter().enumerate() {
        if roles[k] == ClientRole::Benign {
            let (p, _) = poison(shard, &triggers[k], cfg.rho, seed)?;
            data.push(p);
        } else {
            data.push(shard.clone());
        }
    }

    let pair0 = initial_pair(cfg, seed)?;
    let target_ids = arch::top_scalenorm_ids(cfg.split_after)?;
    let fw = gen_feature_wm(seed, cfg.wm_bits, &target_ids, &pair0.top, cfg.alpha)?;
    let mut tcfg = cfg.train_config(Stage::Dual, seed);
    tcfg.passive_clients = vec![type1];
    let (pair, _) = train(&tcfg, pair0, &data, Some(&fw), None)?;

    // The active free-rider forges a claim from trigger reverse-engineering
    // on its own clean shard, declaring the class with the best success rate.
    let acfg = AttackConfig {
        seed,
        ..cfg.attack.clone()
    };
    let mut best: Option<ReversedTrigger> = None;
    for class in 0..cfg.dataset.num_classes {
        let cand = attack::reverse_trigger(&pair, class, &shards[type2], &acfg)?;
        if best.as_ref().map_or(true, |b| cand.asr > b.asr) {
            best = Some(cand);
        }
    }
    let forged = best.expect("at least one class").to_claim(cfg.dataset.num_classes)?;

    let mut claims: Vec<(TriggerPattern, usize)> = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        if k == type2 {
            claims.push((forged.clone(), forged.target_class));
        } else {
            claims.push((triggers[k].clone(), triggers[k].target_class));
        }
    }
    let entries = crate::watermark::free_rider_audit(&claims, &pair, &test, cfg.tau, seed)?;
    Ok(FreeRiderReport { roles, entries })
}

/// Fixed CSV header for the metrics table.
pub const CSV_HEADER: &str =
    "seed,stage,round,acc_main,theta_F,theta_B_mean,theta_B_min,loss_main,loss_wm,attack,attack_param";

fn csv_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{},{}",
        row.seed,
        row.stage,
        row.round,
        row.acc_main,
        row.theta_f,
        row.theta_b_mean,
        row.theta_b_min,
        row.loss_main,
        row.loss_wm,
        row.attack,
        row.attack_param
    )
}

/// Writes metrics.csv, report.json, and per-round history CSVs into `dir`.
pub fn emit_metrics(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &report.rows {
        csv.push_str(&csv_row(row));
        csv.push('\n');
    }
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    for hist in &report.histories {
        let mut out = String::from("round,loss_main,loss_wm,eval_acc,theta_F\n");
        for r in &hist.rounds {
            let mean_loss = r.client_loss.iter().sum::<f64>() / r.client_loss.len().max(1) as f64;
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.round,
                mean_loss,
                r.wm_loss,
                r.eval_acc.map_or(String::new(), |v| format!("{v:.4}")),
                r.theta_f.map_or(String::new(), |v| format!("{v:.4}")),
            ));
        }
        let path = dir.join(format!("history_seed{}_{}.csv", hist.seed, hist.stage));
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads back a report.json produced by [`emit_metrics`].
pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("report parse failed: {e}")))
}
