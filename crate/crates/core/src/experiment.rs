//! End-to-end experiment orchestration: a TOML-backed config, named presets
//! that reproduce each benchmark protocol, and artifact emission (reports,
//! checkpoints, a manifest sufficient to re-run bit-identically).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{
    combine, combine_detections_det, ensemble_models, BinSplit, CombineParams, Strategy,
};
use crate::eval::{
    evaluate_detections, oracle_gt_label_eval, proposal_recall, write_report_csv,
    write_report_json, EvalConfig, EvalReport, GtSet,
};
use crate::heads::{
    save_head, train_balanced, train_repeat_sampled, train_standard, BalancedSamplerConfig,
    Head, TrainSchedule,
};
use crate::scores::ScoreMatrix;
use crate::twostage::{decode_detections, DecodeConfig, Detection};
use crate::world::{
    bin_histogram, generate_world, read_count_csv, stream_rng, BinId, Category, World,
    WorldConfig,
};
use crate::{Error, Result};

// Training RNG streams; disjoint from the world-generation streams.
const STREAM_TRAIN_STANDARD: u64 = 101;
const STREAM_TRAIN_BALANCED: u64 = 102;
const STREAM_TRAIN_REPEAT: u64 = 103;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Standard,
    Balanced,
    Repeat,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::Balanced => "balanced",
            TrainMode::Repeat => "repeat",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMode> {
        match s {
            "standard" => Ok(TrainMode::Standard),
            "balanced" => Ok(TrainMode::Balanced),
            "repeat" => Ok(TrainMode::Repeat),
            other => Err(Error::config(format!(
                "unknown training mode {other:?} (expected standard|balanced|repeat)"
            ))),
        }
    }
}

/// Where the world comes from: a frozen world JSON on disk, or an inline
/// generator config. In TOML the first is `world = "path.json"`, the second
/// a `[world]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldSource {
    Frozen(PathBuf),
    Inline(WorldConfig),
}

impl Default for WorldSource {
    fn default() -> Self {
        WorldSource::Inline(WorldConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the inline world seed and seeds all training streams.
    /// Defaults to the resolved world's own seed.
    pub seed: Option<u64>,
    pub world: WorldSource,
    /// Head used by plain (strategy-less) runs.
    pub mode: TrainMode,
    pub schedule: TrainSchedule,
    /// Schedule for head retraining under balanced sampling. Retraining is a
    /// short finetune, so the default is one constant-rate epoch equivalent
    /// rather than the full `schedule`.
    pub retrain: TrainSchedule,
    pub balanced: BalancedSamplerConfig,
    /// Repeat-factor threshold t for `mode = "repeat"`.
    pub repeat_threshold: f64,
    /// When set, the run trains a standard head and a balanced head and
    /// combines them with this strategy; `mode` is ignored.
    pub strategy: Option<Strategy>,
    pub combine: CombineParams,
    /// Bins routed to the new head by the concatenation strategies.
    pub tail_bins: Vec<BinId>,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            world: WorldSource::default(),
            mode: TrainMode::Standard,
            schedule: TrainSchedule::default(),
            retrain: default_retrain_schedule(),
            balanced: BalancedSamplerConfig::default(),
            repeat_threshold: 0.01,
            strategy: None,
            combine: CombineParams::default(),
            tail_bins: vec![BinId::Lt10, BinId::Lt100],
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// One epoch equivalent at the base rate: long enough to learn every class
/// under balanced exposure, short enough that the retrained head keeps the
/// rough decision boundaries of a brief finetune.
fn default_retrain_schedule() -> TrainSchedule {
    TrainSchedule {
        total_epochs: 1,
        base_lr: 0.008,
        lr_drop_epochs: Vec::new(),
        ..TrainSchedule::default()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = crate::read_to_string(path)?;
        toml::from_str::<ExperimentConfig>(&text)
            .map_err(|e| Error::FileFormat {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
            .and_then(|cfg| {
                cfg.validate()?;
                Ok(cfg)
            })
    }

    pub fn validate(&self) -> Result<()> {
        if let WorldSource::Inline(cfg) = &self.world {
            cfg.validate()?;
        }
        self.schedule.validate()?;
        self.retrain.validate()?;
        self.balanced.validate()?;
        self.decode.validate()?;
        self.eval.validate()?;
        if !(self.repeat_threshold > 0.0 && self.repeat_threshold < 1.0) {
            return Err(Error::config("repeat_threshold must lie in (0, 1)"));
        }
        if self.tail_bins.is_empty() {
            return Err(Error::config("tail_bins must name at least one bin"));
        }
        for (i, bin) in self.tail_bins.iter().enumerate() {
            if self.tail_bins[..i].contains(bin) {
                return Err(Error::config(format!(
                    "tail_bins lists {} twice",
                    bin.token()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve_world(&self) -> Result<World> {
        match &self.world {
            WorldSource::Frozen(path) => World::load(path),
            WorldSource::Inline(cfg) => {
                let mut world_cfg = cfg.clone();
                if let Some(seed) = self.seed {
                    world_cfg.seed = seed;
                }
                generate_world(&world_cfg)
            }
        }
    }

    /// Seed for the training streams: the explicit run seed, else the
    /// resolved world's.
    pub fn run_seed(&self, world: &World) -> u64 {
        self.seed.unwrap_or(world.config.seed)
    }
}

/// Parses a generator config from TOML (used by `gen-world`).
pub fn load_world_config(path: &Path) -> Result<WorldConfig> {
    let text = crate::read_to_string(path)?;
    let cfg: WorldConfig = toml::from_str(&text).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    Table2,
    Table3,
    Table4,
    Table5,
    Table7,
    Table8,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Table1,
        Preset::Table2,
        Preset::Table3,
        Preset::Table4,
        Preset::Table5,
        Preset::Table7,
        Preset::Table8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::Table4 => "table4",
            Preset::Table5 => "table5",
            Preset::Table7 => "table7",
            Preset::Table8 => "table8",
        }
    }

    /// What the preset does, for CLI help and run logs.
    pub fn describe(self) -> &'static str {
        match self {
            Preset::Table1 => "category count binning histogram",
            Preset::Table2 => "standard head at decode thresholds 0.05 and 0.0",
            Preset::Table3 => "average recall of raw proposals at several k",
            Preset::Table4 => "standard head vs ground-truth-label oracle",
            Preset::Table5 => "baseline plus all six combination strategies",
            Preset::Table7 => "standard vs repeat-sampled vs calibrated head",
            Preset::Table8 => "two-member ensemble of calibrated models",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown preset {s:?} (expected table1|table2|table3|table4|table5|table7|table8)"
                ))
            })
    }
}

/// What a run produced: named reports plus every file written.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub reports: Vec<(String, EvalReport)>,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn report(&self, name: &str) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
    }

    fn emit(&mut self, out: &Path, name: &str, report: EvalReport) -> Result<()> {
        let csv = out.join(format!("{name}.csv"));
        write_report_csv(&report, &csv)?;
        self.files.push(csv);
        let json = out.join(format!("{name}.json"));
        write_report_json(&report, &json)?;
        self.files.push(json);
        self.reports.push((name.to_string(), report));
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    preset: Option<&'a str>,
    seed: Option<u64>,
    world_fingerprint: Option<String>,
    config: &'a ExperimentConfig,
}

fn write_manifest(
    out: &Path,
    preset: Option<Preset>,
    seed: Option<u64>,
    world_fingerprint: Option<String>,
    cfg: &ExperimentConfig,
) -> Result<PathBuf> {
    let manifest = Manifest {
        tool: "tailsim",
        version: env!("CARGO_PKG_VERSION"),
        preset: preset.map(Preset::name),
        seed,
        world_fingerprint,
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = out.join("manifest.json");
    crate::write_file(&path, text)?;
    Ok(path)
}

fn save_checkpoint(
    summary: &mut RunSummary,
    out: &Path,
    name: &str,
    head: &Head,
    world: &World,
) -> Result<()> {
    let path = out.join(format!("{name}.json"));
    save_head(head, &world.config.fingerprint(), &path)?;
    summary.files.push(path);
    Ok(())
}

/// Trains one head per `mode` from its dedicated RNG stream; `salt`
/// separates ensemble members.
pub fn train_mode_head(
    world: &World,
    cfg: &ExperimentConfig,
    mode: TrainMode,
    seed: u64,
    salt: u64,
) -> Result<Head> {
    match mode {
        TrainMode::Standard => train_standard(
            world,
            &cfg.schedule,
            &mut stream_rng(seed, STREAM_TRAIN_STANDARD, salt),
        ),
        TrainMode::Balanced => train_balanced(
            world,
            None,
            &cfg.balanced,
            &cfg.retrain,
            &mut stream_rng(seed, STREAM_TRAIN_BALANCED, salt),
        ),
        TrainMode::Repeat => train_repeat_sampled(
            world,
            cfg.repeat_threshold,
            &cfg.schedule,
            &mut stream_rng(seed, STREAM_TRAIN_REPEAT, salt),
        ),
    }
}

fn evaluate_scores(
    world: &World,
    proposals: &[crate::world::Proposal],
    scores: &ScoreMatrix,
    decode: &DecodeConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let detections = decode_detections(scores, proposals, decode)?;
    evaluate_dets(world, &detections, eval)
}

fn evaluate_dets(world: &World, detections: &[Detection], eval: &EvalConfig) -> Result<EvalReport> {
    let gt = GtSet::from_images(&world.val_images);
    evaluate_detections(detections, &gt, &world.categories, eval)
}

/// Runs one experiment into `out_dir`: either a named preset or the plain
/// config-driven pipeline. Creates the directory, writes a manifest, and
/// returns every report produced.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    preset: Option<Preset>,
    counts: Option<&Path>,
    out_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::FileIo {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    match preset {
        None => run_custom(cfg, out_dir),
        Some(Preset::Table1) => run_table1(cfg, counts, out_dir),
        Some(Preset::Table2) => run_table2(cfg, out_dir),
        Some(Preset::Table3) => run_table3(cfg, out_dir),
        Some(Preset::Table4) => run_table4(cfg, out_dir),
        Some(Preset::Table5) => run_table5(cfg, out_dir),
        Some(Preset::Table7) => run_table7(cfg, out_dir),
        Some(Preset::Table8) => run_table8(cfg, out_dir),
    }
}

/// Plain pipeline: one trained head (per `mode`), or a calibrated pair when
/// `strategy` is set; decode, evaluate, report.
fn run_custom(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let seed = cfg.run_seed(&world);
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        None,
        Some(seed),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    match cfg.strategy {
        None => {
            let head = train_mode_head(&world, cfg, cfg.mode, seed, 0)?;
            save_checkpoint(
                &mut summary,
                out,
                &format!("head_{}", cfg.mode.name()),
                &head,
                &world,
            )?;
            let (proposals, scores) = head.score_images(&world, &world.val_images)?;
            let report = evaluate_scores(&world, &proposals, &scores, &cfg.decode, &cfg.eval)?;
            summary.emit(out, "report", report)?;
        }
        Some(strategy) => {
            let orig = train_mode_head(&world, cfg, TrainMode::Standard, seed, 0)?;
            let new = train_mode_head(&world, cfg, TrainMode::Balanced, seed, 0)?;
            save_checkpoint(&mut summary, out, "head_standard", &orig, &world)?;
            save_checkpoint(&mut summary, out, "head_balanced", &new, &world)?;
            let split = BinSplit::from_categories(&world.categories, &cfg.tail_bins);
            let (proposals, orig_scores) = orig.score_images(&world, &world.val_images)?;
            let (_, new_scores) = new.score_images(&world, &world.val_images)?;
            let report = strategy_report(
                &world,
                strategy,
                &proposals,
                &orig_scores,
                &new_scores,
                &split,
                cfg,
            )?;
            summary.emit(out, "report", report)?;
        }
    }
    Ok(summary)
}

fn strategy_report(
    world: &World,
    strategy: Strategy,
    proposals: &[crate::world::Proposal],
    orig: &ScoreMatrix,
    new: &ScoreMatrix,
    split: &BinSplit,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    if strategy == Strategy::Det {
        let dets_orig = decode_detections(orig, proposals, &cfg.decode)?;
        let dets_new = decode_detections(new, proposals, &cfg.decode)?;
        let merged =
            combine_detections_det(&dets_orig, &dets_new, split, cfg.decode.max_per_image)?;
        evaluate_dets(world, &merged, &cfg.eval)
    } else {
        let combined = combine(strategy, orig, new, split, &cfg.combine)?;
        evaluate_scores(world, proposals, &combined, &cfg.decode, &cfg.eval)
    }
}

/// Bin histogram of category counts: from a `category_id,count` CSV when
/// given, else from the resolved world's realized training counts.
fn run_table1(cfg: &ExperimentConfig, counts: Option<&Path>, out: &Path) -> Result<RunSummary> {
    let mut summary = RunSummary::default();
    let (categories, fingerprint, seed): (Vec<Category>, Option<String>, Option<u64>) =
        match counts {
            Some(path) => (read_count_csv(path)?, None, None),
            None => {
                let world = cfg.resolve_world()?;
                (
                    world.categories.clone(),
                    Some(world.config.fingerprint()),
                    Some(cfg.run_seed(&world)),
                )
            }
        };
    summary
        .files
        .push(write_manifest(out, Some(Preset::Table1), seed, fingerprint, cfg)?);

    let histogram = bin_histogram(&categories);
    let mut text = String::from("bin,label,classes,instances\n");
    for bin in BinId::ALL {
        let instances: u64 = categories
            .iter()
            .filter(|c| c.bin == bin)
            .map(|c| c.train_count)
            .sum();
        // Labels contain commas, so they are quoted.
        text.push_str(&format!(
            "{},\"{}\",{},{}\n",
            bin.token(),
            bin.label(),
            histogram[bin.index()],
            instances
        ));
    }
    let path = out.join("bins.csv");
    crate::write_file(&path, text)?;
    summary.files.push(path);
    Ok(summary)
}

/// Decode-threshold ablation: the same standard head evaluated at score
/// thresholds 0.05 and 0.0.
fn run_table2(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let seed = cfg.run_seed(&world);
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        Some(Preset::Table2),
        Some(seed),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    let head = train_mode_head(&world, cfg, TrainMode::Standard, seed, 0)?;
    save_checkpoint(&mut summary, out, "head_standard", &head, &world)?;
    let (proposals, scores) = head.score_images(&world, &world.val_images)?;
    for (tag, threshold) in [("thr005", 0.05), ("thr000", 0.0)] {
        let decode = DecodeConfig {
            score_threshold: threshold,
            ..cfg.decode.clone()
        };
        let report = evaluate_scores(&world, &proposals, &scores, &decode, &cfg.eval)?;
        summary.emit(out, &format!("report_{tag}"), report)?;
    }
    Ok(summary)
}

/// Average recall of the frozen proposals at several top-k budgets.
fn run_table3(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        Some(Preset::Table3),
        Some(cfg.run_seed(&world)),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    let mut proposals = Vec::new();
    for image in &world.val_images {
        proposals.extend(world.frozen_proposals(image));
    }
    let gt = GtSet::from_images(&world.val_images);
    let mut ks = vec![10, 100, 300, cfg.eval.proposal_k];
    ks.sort_unstable();
    ks.dedup();
    let mut table = BTreeMap::new();
    for k in ks {
        table.insert(k, proposal_recall(&proposals, &gt, k, &cfg.eval)?);
    }

    let mut text = String::from("k,ar\n");
    for (k, ar) in &table {
        text.push_str(&format!("{k},{ar}\n"));
    }
    let csv = out.join("ar.csv");
    crate::write_file(&csv, text)?;
    summary.files.push(csv);
    let mut json = serde_json::to_string_pretty(&table)?;
    json.push('\n');
    let json_path = out.join("ar.json");
    crate::write_file(&json_path, json)?;
    summary.files.push(json_path);
    Ok(summary)
}

/// Standard head against the ground-truth-label oracle.
fn run_table4(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let seed = cfg.run_seed(&world);
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        Some(Preset::Table4),
        Some(seed),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    let head = train_mode_head(&world, cfg, TrainMode::Standard, seed, 0)?;
    save_checkpoint(&mut summary, out, "head_standard", &head, &world)?;
    let (proposals, scores) = head.score_images(&world, &world.val_images)?;
    let baseline = evaluate_scores(&world, &proposals, &scores, &cfg.decode, &cfg.eval)?;
    summary.emit(out, "report_baseline", baseline)?;
    let oracle = oracle_gt_label_eval(&world, &world.val_images, &cfg.eval)?;
    summary.emit(out, "report_oracle", oracle)?;
    Ok(summary)
}

/// Baseline plus every combination strategy, all from one standard/balanced
/// head pair.
fn run_table5(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let seed = cfg.run_seed(&world);
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        Some(Preset::Table5),
        Some(seed),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    let orig = train_mode_head(&world, cfg, TrainMode::Standard, seed, 0)?;
    let new = train_mode_head(&world, cfg, TrainMode::Balanced, seed, 0)?;
    save_checkpoint(&mut summary, out, "head_standard", &orig, &world)?;
    save_checkpoint(&mut summary, out, "head_balanced", &new, &world)?;
    let split = BinSplit::from_categories(&world.categories, &cfg.tail_bins);
    let (proposals, orig_scores) = orig.score_images(&world, &world.val_images)?;
    let (_, new_scores) = new.score_images(&world, &world.val_images)?;

    let baseline = evaluate_scores(&world, &proposals, &orig_scores, &cfg.decode, &cfg.eval)?;
    summary.emit(out, "report_baseline", baseline)?;
    for strategy in Strategy::ALL {
        let report = strategy_report(
            &world,
            strategy,
            &proposals,
            &orig_scores,
            &new_scores,
            &split,
            cfg,
        )?;
        let tag = strategy.name().replace('-', "_");
        summary.emit(out, &format!("report_{tag}"), report)?;
    }
    Ok(summary)
}

/// Standard vs image-level repeat sampling vs the calibrated pair.
fn run_table7(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let seed = cfg.run_seed(&world);
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        Some(Preset::Table7),
        Some(seed),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    let standard = train_mode_head(&world, cfg, TrainMode::Standard, seed, 0)?;
    let repeat = train_mode_head(&world, cfg, TrainMode::Repeat, seed, 0)?;
    let balanced = train_mode_head(&world, cfg, TrainMode::Balanced, seed, 0)?;
    save_checkpoint(&mut summary, out, "head_standard", &standard, &world)?;
    save_checkpoint(&mut summary, out, "head_repeat", &repeat, &world)?;
    save_checkpoint(&mut summary, out, "head_balanced", &balanced, &world)?;

    let split = BinSplit::from_categories(&world.categories, &cfg.tail_bins);
    let (proposals, standard_scores) = standard.score_images(&world, &world.val_images)?;
    let (_, repeat_scores) = repeat.score_images(&world, &world.val_images)?;
    let (_, balanced_scores) = balanced.score_images(&world, &world.val_images)?;

    let baseline =
        evaluate_scores(&world, &proposals, &standard_scores, &cfg.decode, &cfg.eval)?;
    summary.emit(out, "report_baseline", baseline)?;
    let repeat_report =
        evaluate_scores(&world, &proposals, &repeat_scores, &cfg.decode, &cfg.eval)?;
    summary.emit(out, "report_repeat", repeat_report)?;
    let cat = strategy_report(
        &world,
        Strategy::Cat,
        &proposals,
        &standard_scores,
        &balanced_scores,
        &split,
        cfg,
    )?;
    summary.emit(out, "report_cat", cat)?;
    Ok(summary)
}

/// Two calibrated members trained from salted streams of the run seed,
/// ensembled by score averaging.
fn run_table8(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let world = cfg.resolve_world()?;
    let seed = cfg.run_seed(&world);
    let mut summary = RunSummary::default();
    summary.files.push(write_manifest(
        out,
        Some(Preset::Table8),
        Some(seed),
        Some(world.config.fingerprint()),
        cfg,
    )?);

    let split = BinSplit::from_categories(&world.categories, &cfg.tail_bins);
    let mut proposals = None;
    let mut member_scores = Vec::new();
    for member in 0..2u64 {
        let orig = train_mode_head(&world, cfg, TrainMode::Standard, seed, member)?;
        let new = train_mode_head(&world, cfg, TrainMode::Balanced, seed, member)?;
        save_checkpoint(
            &mut summary,
            out,
            &format!("head_standard_member{member}"),
            &orig,
            &world,
        )?;
        save_checkpoint(
            &mut summary,
            out,
            &format!("head_balanced_member{member}"),
            &new,
            &world,
        )?;
        let (props, orig_scores) = orig.score_images(&world, &world.val_images)?;
        let (_, new_scores) = new.score_images(&world, &world.val_images)?;
        let combined = combine(Strategy::Cat, &orig_scores, &new_scores, &split, &cfg.combine)?;
        let report = evaluate_scores(&world, &props, &combined, &cfg.decode, &cfg.eval)?;
        summary.emit(out, &format!("report_member{member}"), report)?;
        proposals.get_or_insert(props);
        member_scores.push(combined);
    }

    let refs: Vec<&ScoreMatrix> = member_scores.iter().collect();
    let ensembled = ensemble_models(&refs)?;
    let report = evaluate_scores(
        &world,
        proposals.as_ref().unwrap(),
        &ensembled,
        &cfg.decode,
        &cfg.eval,
    )?;
    summary.emit(out, "report_ensemble", report)?;
    Ok(summary)
}
