//! End-to-end runs driven by a JSON configuration, and their reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav_bank::{class_cavs, load_cavs, save_cavs, CavOrigin, CavSet, ClassCavMethod};
use crate::concept_shap::{class_importance, ImportanceReport, ShapSettings};
use crate::discovery::{
    completeness, concept_scores_with, fit_head, train_discovery, DiscoveryConfig, EpochLog, SurrogateHead,
    TrainLog,
};
use crate::error::{Error, Result, StageExt};
use crate::receptive_field::{FieldGeometry, ReceptiveFields};
use crate::selection::{select_all, RelevanceSet, SelectOptions, Strategy};
use crate::tensor_store::{load_bundle, read_npy, DumpBundle};
use crate::text_matcher::{
    common_description, log_marginal, similarity_matrix, soft_wpmi_with_marginal, top_k, DescriptionRanking,
    WpmiParams,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "CAVLEX_THREADS";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavMode {
    #[default]
    Discover,
    ClassCavs,
    ImportCavs,
}

/// Population for the text marginal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    #[default]
    AllImages,
    /// Union of the images in every relevance set of the run.
    RelevanceUnion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundle manifest, relative to the config file.
    pub bundle: PathBuf,
    pub mode: CavMode,
    /// CAV file for `import_cavs`.
    pub import_path: Option<PathBuf>,
    pub class_cav_method: ClassCavMethod,
    /// Discovery settings; for the other modes these drive the head fit.
    pub discovery: DiscoveryConfig,
    pub dedup_threshold: f64,
    pub strategies: Vec<Strategy>,
    pub count: usize,
    pub allow_multiple_fields_per_image: bool,
    pub k: usize,
    pub wpmi: WpmiParams,
    pub background: Background,
    pub unit_normalize_text: bool,
    pub shap: ShapSettings,
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: PathBuf::new(),
            mode: CavMode::Discover,
            import_path: None,
            class_cav_method: ClassCavMethod::CenteredMean,
            discovery: DiscoveryConfig::default(),
            dedup_threshold: 0.95,
            strategies: Strategy::ALL.to_vec(),
            count: 100,
            allow_multiple_fields_per_image: false,
            k: 5,
            wpmi: WpmiParams::default(),
            background: Background::AllImages,
            unit_normalize_text: true,
            shap: ShapSettings::default(),
            output_dir: PathBuf::from("out"),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn bundle_path(&self) -> PathBuf {
        self.resolve(&self.bundle)
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn select_options(&self) -> SelectOptions {
        SelectOptions {
            count: self.count,
            allow_multiple_fields_per_image: self.allow_multiple_fields_per_image,
        }
    }

    /// Checks that do not need the bundle.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.bundle.as_os_str().is_empty() {
            return bad("`bundle` (manifest path) is required".into());
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return bad(format!("dedup_threshold {} outside (0, 1]", self.dedup_threshold));
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return bad(format!("strategy {s} listed twice"));
            }
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.mode == CavMode::ImportCavs && self.import_path.is_none() {
            return bad("mode import_cavs needs `import_path`".into());
        }
        self.discovery.validate()?;
        self.wpmi.validate()?;
        self.shap.validate()
    }

    /// Checks against a loaded bundle.
    pub fn validate_for(&self, bundle: &DumpBundle) -> Result<()> {
        self.validate()?;
        let s = bundle.num_texts();
        if self.k > s {
            return Err(Error::Config(format!("k = {} exceeds the {s} catalog texts", self.k)));
        }
        Ok(())
    }
}

/// Sets the rayon worker count from `CAVLEX_THREADS` (0 means one worker) and
/// runs `f` inside that pool. Without the variable rayon's default applies.
pub fn with_configured_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got '{v}'")))?;
            n.max(1)
        }
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Final epoch of a training run, without wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub restart: usize,
    pub objectives: Vec<f64>,
    pub epochs: usize,
    pub cross_entropy: f64,
    pub r1: f64,
    pub r2: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl TrainingSummary {
    fn from_log(log: &TrainLog) -> Option<Self> {
        let last: &EpochLog = log.last()?;
        Some(Self {
            seed: log.seed,
            restart: log.restart,
            objectives: log.objectives.clone(),
            epochs: log.epochs.len(),
            cross_entropy: last.cross_entropy,
            r1: last.r1,
            r2: last.r2,
            train_accuracy: last.train_accuracy,
            test_accuracy: last.test_accuracy,
        })
    }
}

/// CAVs after dedup together with the head used for importance.
#[derive(Debug, Clone)]
pub struct CavStage {
    pub cavs: CavSet,
    pub head: SurrogateHead,
    pub before_dedup: usize,
    /// Joint CAV and head training, for `discover`.
    pub discovery_log: Option<TrainLog>,
    /// Head refit on fixed CAVs, when one was needed.
    pub head_log: Option<TrainLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageFile {
    before_dedup: usize,
    dedup_threshold: f64,
    head: SurrogateHead,
}

const STAGE_CAVS: &str = "cavs.npy";
const STAGE_FILE: &str = "stage.json";
const TRAIN_LOG: &str = "train_log.jsonl";
const HEAD_LOG: &str = "head_log.jsonl";

fn import_cavs(cfg: &RunConfig, bundle: &DumpBundle) -> Result<CavSet> {
    let path = cfg.resolve(cfg.import_path.as_deref().expect("validated"));
    let t = read_npy(&path)?;
    if t.shape().first() == Some(&0) {
        return Err(Error::Config(format!("{} holds no CAVs", path.display())));
    }
    let cavs = load_cavs(&path)?;
    if cavs.layer().is_empty() {
        let raw = cavs.rows().to_vec();
        return CavSet::normalize(&raw, cavs.dim(), CavOrigin::Imported, &bundle.meta().layer);
    }
    Ok(cavs)
}

/// Obtains CAVs for the configured mode, deduplicates them and makes sure a
/// head trained on exactly the kept CAVs is available.
pub fn prepare_cavs(cfg: &RunConfig, bundle: &DumpBundle) -> Result<CavStage> {
    let (all, head, discovery_log) = match cfg.mode {
        CavMode::Discover => {
            let d = train_discovery(bundle, &cfg.discovery).stage("concept_discovery")?;
            (d.cavs, Some(d.head), Some(d.log))
        }
        CavMode::ClassCavs => (class_cavs(bundle, cfg.class_cav_method).stage("cav_bank")?, None, None),
        CavMode::ImportCavs => (import_cavs(cfg, bundle).stage("cav_bank")?, None, None),
    };
    if all.dim() != bundle.channels() {
        return Err(Error::DimensionMismatch {
            expected: bundle.channels(),
            found: all.dim(),
        })
        .stage("cav_bank");
    }
    let cavs = all.dedup(cfg.dedup_threshold);
    if cavs.len() < all.len() {
        log::info!("dedup at {} kept {} of {} CAVs", cfg.dedup_threshold, cavs.len(), all.len());
    }
    let (head, head_log) = match head {
        Some(h) if cavs.len() == all.len() => (h, None),
        _ => {
            let (h, log) = fit_head(bundle, &cavs, &cfg.discovery).stage("concept_discovery")?;
            (h, Some(log))
        }
    };
    Ok(CavStage {
        cavs,
        head,
        before_dedup: all.len(),
        discovery_log,
        head_log,
    })
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))? + "\n";
    write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `cavs.npy` (+ sidecar), `stage.json` and the training logs.
pub fn save_stage(dir: impl AsRef<Path>, stage: &CavStage, dedup_threshold: f64) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    save_cavs(dir.join(STAGE_CAVS), &stage.cavs, Some(dedup_threshold))?;
    let file = StageFile {
        before_dedup: stage.before_dedup,
        dedup_threshold,
        head: stage.head.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("stage", e))? + "\n";
    write_atomic(&dir.join(STAGE_FILE), text.as_bytes())?;
    if let Some(log) = &stage.discovery_log {
        write_atomic(&dir.join(TRAIN_LOG), log.to_json_lines().as_bytes())?;
    }
    if let Some(log) = &stage.head_log {
        write_atomic(&dir.join(HEAD_LOG), log.to_json_lines().as_bytes())?;
    }
    Ok(())
}

/// Reads a stage written by [`save_stage`]; `None` when none exists.
pub fn load_stage(dir: impl AsRef<Path>, bundle: &DumpBundle) -> Result<Option<CavStage>> {
    let dir = dir.as_ref();
    let (cavs_path, stage_path) = (dir.join(STAGE_CAVS), dir.join(STAGE_FILE));
    if !cavs_path.is_file() || !stage_path.is_file() {
        return Ok(None);
    }
    let cavs = load_cavs(&cavs_path)?;
    let text = fs::read_to_string(&stage_path).map_err(|e| Error::io(&stage_path, e))?;
    let file: StageFile = serde_json::from_str(&text).map_err(|e| Error::json(stage_path.display().to_string(), e))?;
    file.head.check(&cavs, bundle)?;
    let read_log = |name: &str| -> Result<Option<TrainLog>> {
        let p = dir.join(name);
        if !p.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let epochs = text
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(p.display().to_string(), e)))
            .collect::<Result<Vec<EpochLog>>>()?;
        let seed = epochs.first().map_or(0, |e| e.seed);
        Ok(Some(TrainLog {
            seed,
            restart: 0,
            objectives: Vec::new(),
            epochs,
        }))
    };
    Ok(Some(CavStage {
        cavs,
        head: file.head,
        before_dedup: file.before_dedup,
        discovery_log: read_log(TRAIN_LOG)?,
        head_log: read_log(HEAD_LOG)?,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub relevance: RelevanceSet,
    pub ranking: DescriptionRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    /// Index among the kept CAVs.
    pub index: usize,
    /// Index before deduplication.
    pub source_index: usize,
    pub label: Option<String>,
    /// One entry per configured strategy, in config order.
    pub results: Vec<StrategyResult>,
}

/// Relevance sets and text rankings for every kept CAV and strategy.
pub fn describe(cfg: &RunConfig, bundle: &DumpBundle, cavs: &CavSet) -> Result<Vec<ConceptEntry>> {
    let fields = ReceptiveFields::new(bundle.arch()).stage("receptive_field")?;
    let field = concept_scores_with(bundle, cavs, cfg.discovery.normalized_scores).stage("concept_discovery")?;
    let opts = cfg.select_options();
    let sets: Vec<Vec<RelevanceSet>> = cfg
        .strategies
        .iter()
        .map(|&s| select_all(&field, &fields, s, &opts))
        .collect::<Result<_>>()
        .stage("selection")?;

    let p = similarity_matrix(bundle.image_embeddings(), bundle.text_embeddings()).stage("text_matcher")?;
    let marginal = match cfg.background {
        Background::AllImages => log_marginal(&p, cfg.wpmi.temperature_a),
        Background::RelevanceUnion => {
            let mut union: Vec<usize> = sets.iter().flatten().flat_map(|s| s.image_indices()).collect();
            union.sort_unstable();
            union.dedup();
            p.select_rows(&union).and_then(|bg| log_marginal(&bg, cfg.wpmi.temperature_a))
        }
    }
    .stage("text_matcher")?;

    (0..cavs.len())
        .into_par_iter()
        .map(|j| {
            let results = cfg
                .strategies
                .iter()
                .zip(&sets)
                .map(|(&strategy, per_cav)| {
                    let relevance = per_cav[j].clone();
                    let rows = p.select_rows(&relevance.image_indices())?;
                    let scores = soft_wpmi_with_marginal(&rows, &relevance.weights(), &marginal, &cfg.wpmi)?;
                    let topk = top_k(&scores, bundle.texts(), cfg.k)?;
                    let common =
                        common_description(&topk, bundle.text_embeddings(), bundle.texts(), cfg.unit_normalize_text)?;
                    Ok(StrategyResult {
                        relevance,
                        ranking: DescriptionRanking {
                            cav: j,
                            strategy,
                            params: cfg.wpmi,
                            topk,
                            common,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()
                .stage("text_matcher")?;
            Ok(ConceptEntry {
                index: j,
                source_index: cavs.source_index()[j],
                label: cavs.label(j).map(str::to_string),
                results,
            })
        })
        .collect()
}

/// Plain-text statements of the formulas behind the reported numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedFormulas {
    pub soft_wpmi: String,
    pub discovery_objective: String,
    pub completeness: String,
    pub per_class_importance: String,
    pub explanation_quality: String,
}

impl Default for ReconstructedFormulas {
    fn default() -> Self {
        Self {
            soft_wpmi: "score(t) = sum_i log(1 - pi_i + pi_i * p(t|x_i)) - lambda * log pbar(t); \
                        p(t|x) = softmax_t(temperature_a * cos(x, t)); pi = weights rescaled onto \
                        [soft_low, soft_high]; pbar = mean of p(t|x) over the background images"
                .into(),
            discovery_objective: "CE(head(z), y) - lambda1 * R1 + lambda2 * R2; z_j = max_f c_j.x_f if above \
                                  beta else 0; R1 = mean over concepts of the mean of the top_m_images local \
                                  scores; R2 = mean over ordered pairs of |c_j . c_j'|"
                .into(),
            completeness: "max(0, (accuracy - 1/K) / (a_orig - 1/K)) with unused concept scores zeroed; \
                           empty set = 0"
                .into(),
            per_class_importance: "Shapley values of per-class normalized recall under concept masking".into(),
            explanation_quality: "per class max(0, (recall - 1/K) / (a_orig - 1/K)) with all concepts kept".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub n: usize,
    pub grid_hw: (usize, usize),
    pub channels: usize,
    pub num_texts: usize,
    pub num_classes: usize,
    pub layer: String,
    pub input_hw: (usize, usize),
    pub a_orig: f64,
    pub receptive_field: FieldGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavSummary {
    pub origin: CavOrigin,
    pub layer: String,
    pub before_dedup: usize,
    pub kept: usize,
    pub dedup_threshold: f64,
    pub source_index: Vec<usize>,
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub tool: ToolInfo,
    pub reconstructed_formulas: ReconstructedFormulas,
    pub config: RunConfig,
    pub bundle: BundleSummary,
    pub cavs: CavSummary,
    pub training: Option<TrainingSummary>,
    pub head_fit: Option<TrainingSummary>,
    pub completeness: f64,
    pub concepts: Vec<ConceptEntry>,
    pub importance: ImportanceReport,
    pub class_names: Vec<String>,
}

/// Assembles a report from finished stages.
pub fn assemble_report(
    cfg: &RunConfig,
    bundle: &DumpBundle,
    stage: &CavStage,
    concepts: Vec<ConceptEntry>,
    importance: ImportanceReport,
) -> Result<ReportBundle> {
    let geometry = ReceptiveFields::new(bundle.arch())?.geometry();
    let eta = completeness(&stage.cavs, &stage.head, bundle, &vec![true; stage.cavs.len()])?;
    Ok(ReportBundle {
        schema_version: SCHEMA_VERSION,
        tool: ToolInfo {
            name: "cavlex".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        reconstructed_formulas: ReconstructedFormulas::default(),
        config: RunConfig {
            base_dir: PathBuf::new(),
            ..cfg.clone()
        },
        bundle: BundleSummary {
            n: bundle.n(),
            grid_hw: bundle.grid_hw(),
            channels: bundle.channels(),
            num_texts: bundle.num_texts(),
            num_classes: bundle.num_classes(),
            layer: bundle.meta().layer.clone(),
            input_hw: bundle.arch().input_hw(),
            a_orig: bundle.meta().a_orig,
            receptive_field: geometry,
        },
        cavs: CavSummary {
            origin: stage.cavs.origin(),
            layer: stage.cavs.layer().to_string(),
            before_dedup: stage.before_dedup,
            kept: stage.cavs.len(),
            dedup_threshold: cfg.dedup_threshold,
            source_index: stage.cavs.source_index().to_vec(),
            labels: stage.cavs.labels().map(<[String]>::to_vec),
        },
        training: stage.discovery_log.as_ref().and_then(TrainingSummary::from_log),
        head_fit: stage.head_log.as_ref().and_then(TrainingSummary::from_log),
        completeness: eta,
        concepts,
        importance,
        class_names: (0..bundle.num_classes()).map(|c| bundle.class_name(c)).collect(),
    })
}

/// Loads the bundle and runs every stage.
pub fn run_pipeline(cfg: &RunConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let bundle = load_bundle(cfg.bundle_path()).stage("tensor_store")?;
    run_on_bundle(cfg, &bundle)
}

/// Runs every stage on an already loaded bundle.
pub fn run_on_bundle(cfg: &RunConfig, bundle: &DumpBundle) -> Result<ReportBundle> {
    cfg.validate_for(bundle)?;
    let stage = prepare_cavs(cfg, bundle)?;
    let concepts = describe(cfg, bundle, &stage.cavs)?;
    let importance = class_importance(&stage.cavs, &stage.head, bundle, &cfg.shap).stage("concept_shap")?;
    assemble_report(cfg, bundle, &stage, concepts, importance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub fn report_json(report: &ReportBundle) -> Result<String> {
    Ok(serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))? + "\n")
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ReportBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Writes `report.json` and/or `report.md` into `dir`.
pub fn emit_report(report: &ReportBundle, dir: impl AsRef<Path>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut written = Vec::new();
    for format in formats {
        let (name, body) = match format {
            ReportFormat::Json => ("report.json", report_json(report)?),
            ReportFormat::Markdown => ("report.md", render_markdown(report)),
        };
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

/// Human-readable report: one description table per strategy and the
/// per-class importance lists.
pub fn render_markdown(report: &ReportBundle) -> String {
    let mut md = String::new();
    let b = &report.bundle;
    let c = &report.cavs;
    let _ = writeln!(md, "# Concept descriptions for layer `{}`\n", b.layer);
    let _ = writeln!(
        md,
        "{} probe images, {}x{} positions, {} channels, {} texts, {} classes.",
        b.n, b.grid_hw.0, b.grid_hw.1, b.channels, b.num_texts, b.num_classes
    );
    let _ = writeln!(
        md,
        "{} CAVs ({:?}), {} kept after deduplication at {}. Completeness {:.4}.\n",
        c.before_dedup, c.origin, c.kept, c.dedup_threshold, report.completeness
    );
    let k = report.config.k;
    for (si, strategy) in report.config.strategies.iter().enumerate() {
        let _ = writeln!(md, "## Strategy `{strategy}`\n");
        let _ = writeln!(md, "| CAV | label | common | top-{k} |");
        let _ = writeln!(md, "|---|---|---|---|");
        for concept in &report.concepts {
            let r = &concept.results[si].ranking;
            let top: Vec<String> = r.topk.iter().map(|e| cell(&e.text)).collect();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                concept.index,
                cell(concept.label.as_deref().unwrap_or("-")),
                cell(&r.common.text),
                top.join(", ")
            );
        }
        md.push('\n');
    }
    let imp = &report.importance;
    let _ = writeln!(md, "## Concept importance\n");
    let method = match imp.method {
        crate::concept_shap::ShapMethod::Exact => "exact".to_string(),
        crate::concept_shap::ShapMethod::MonteCarlo => {
            format!("Monte Carlo, {} samples", imp.samples.unwrap_or_default())
        }
    };
    let _ = writeln!(md, "Shapley values ({method}); per-class measure: {}.\n", imp.per_class_measure);
    let global: Vec<String> = imp
        .global_ranking()
        .into_iter()
        .take(5)
        .map(|j| format!("CAV {j} ({:.3})", imp.global[j]))
        .collect();
    let _ = writeln!(md, "- overall: {}", global.join(", "));
    for (class, name) in report.class_names.iter().enumerate() {
        let ranked: Vec<String> = imp
            .ranking_for_class(class)
            .into_iter()
            .take(5)
            .map(|j| format!("CAV {j} ({:.3})", imp.per_class[class][j]))
            .collect();
        let _ = writeln!(
            md,
            "- {} (quality {:.3}): {}",
            cell(name),
            imp.quality[class],
            ranked.join(", ")
        );
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg: RunConfig = serde_json::from_str(r#"{"bundle": "b/manifest.json"}"#).unwrap();
        assert_eq!(cfg.dedup_threshold, 0.95);
        assert_eq!(cfg.strategies, Strategy::ALL.to_vec());
        assert_eq!((cfg.count, cfg.k), (100, 5));
        assert_eq!(cfg.mode, CavMode::Discover);
        assert!(cfg.validate().is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bundle": "b", "kk": 3}"#).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = RunConfig {
            bundle: "m.json".into(),
            ..Default::default()
        };
        for bad in [
            RunConfig { bundle: PathBuf::new(), ..ok.clone() },
            RunConfig { dedup_threshold: 0.0, ..ok.clone() },
            RunConfig { strategies: vec![], ..ok.clone() },
            RunConfig { strategies: vec![Strategy::FMax, Strategy::FMax], ..ok.clone() },
            RunConfig { k: 0, ..ok.clone() },
            RunConfig { count: 0, ..ok.clone() },
            RunConfig { mode: CavMode::ImportCavs, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn paths_resolve_against_config_directory() {
        let cfg = RunConfig {
            bundle: "fixture/manifest.json".into(),
            base_dir: "/data/run".into(),
            ..Default::default()
        };
        assert_eq!(cfg.bundle_path(), PathBuf::from("/data/run/fixture/manifest.json"));
        assert_eq!(cfg.output_path(), PathBuf::from("/data/run/out"));
        let abs = RunConfig { bundle: "/x/m.json".into(), ..cfg };
        assert_eq!(abs.bundle_path(), PathBuf::from("/x/m.json"));
    }

    #[test]
    fn markdown_cells_escape_pipes() {
        assert_eq!(cell("a|b\nc"), "a\\|b c");
    }
}
