//! Batch driver: containers in, masks and reports out; ablation grids over
//! fixture sets; directory-level evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate, class_slice, refine, AggregateOptions, LayerFilter, ScaleSelect, TimestepRange,
    DEFAULT_CROSS_SCALE, DEFAULT_SELF_SCALE, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, miou, ConfusionMatrix, MiouReport, Reduction};
use crate::fixtures::{fabricate_container, render_gt, SceneSpec};
use crate::mask::{
    decide, objectness, read_mask, write_color_mask, write_mask, Normalization, SegMask,
    DEFAULT_ALPHA, DEFAULT_BETA,
};
use crate::prompt::{ClassVocabulary, DEFAULT_TOP_K};
use crate::store::{read_container, Container, ImageSize};
use crate::{ClassId, BACKGROUND, UNCERTAIN};

/// Where thresholding happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionResolution {
    /// Upsample objectness to the image, then threshold.
    #[default]
    Image,
    /// Threshold on the self-attention grid, then upsample labels
    /// nearest-neighbour.
    AttentionGrid,
}

/// How uncertain pixels of a synthesized mask are scored against ground
/// truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertainScoring {
    /// Count them as background predictions.
    #[default]
    Background,
    /// Leave them out of the confusion matrix.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tau: u32,
    pub alpha: f32,
    pub beta: f32,
    pub cross_scale: u16,
    pub self_scale: u16,
    /// `None` averages all timesteps.
    pub timestep_range: Option<TimestepRange>,
    pub layers: LayerFilter,
    pub top_k: usize,
    pub reduction: Reduction,
    pub normalization: Normalization,
    pub decide_at: DecisionResolution,
    pub include_background: bool,
    pub uncertain_scoring: UncertainScoring,
    /// Also write palette-coloured copies of generated masks.
    pub color_masks: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            cross_scale: DEFAULT_CROSS_SCALE,
            self_scale: DEFAULT_SELF_SCALE,
            timestep_range: None,
            layers: LayerFilter::All,
            top_k: DEFAULT_TOP_K,
            reduction: Reduction::Sum,
            normalization: Normalization::MinMax,
            decide_at: DecisionResolution::Image,
            include_background: true,
            uncertain_scoring: UncertainScoring::Background,
            color_masks: false,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha && self.alpha < self.beta && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= alpha < beta <= 1 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let Some(r) = self.timestep_range {
            if r.lo > r.hi {
                return Err(Error::Config(format!("empty timestep range {}..={}", r.lo, r.hi)));
            }
        }
        Ok(())
    }

    pub fn aggregate_options(&self) -> AggregateOptions {
        AggregateOptions {
            scales: ScaleSelect {
                self_scale: self.self_scale,
                cross_scale: self.cross_scale,
            },
            timesteps: self.timestep_range,
            layers: self.layers.clone(),
        }
    }
}

/// Runs aggregation, class slicing, refinement and thresholding for one
/// container.
pub fn synthesize_mask(container: &Container, config: &PipelineConfig) -> Result<SegMask> {
    config.validate()?;
    let manifest = container.manifest();
    let agg = aggregate(container, &config.aggregate_options())?;
    let sliced = class_slice(&agg, manifest)?;
    let refined = refine(&sliced, config.tau)?;
    match config.decide_at {
        DecisionResolution::Image => {
            let field = objectness(&refined, manifest.image_size, config.normalization)?;
            decide(&field, config.alpha, config.beta)
        }
        DecisionResolution::AttentionGrid => {
            let grid = ImageSize::new(u32::from(refined.grid.h), u32::from(refined.grid.w));
            let field = objectness(&refined, grid, config.normalization)?;
            Ok(decide(&field, config.alpha, config.beta)?.resize_nearest(manifest.image_size))
        }
    }
}

/// Mask ready for scoring under `scoring`: uncertain pixels become
/// background, or the matching ground-truth pixels become ignored.
pub fn scorable(pred: &SegMask, gt: &SegMask, scoring: UncertainScoring) -> Result<(SegMask, SegMask)> {
    match scoring {
        UncertainScoring::Background => Ok((pred.with_uncertain_as(BACKGROUND), gt.clone())),
        UncertainScoring::Ignore => {
            if pred.data().len() != gt.data().len() {
                return Err(Error::Shape("prediction and ground truth differ in size".into()));
            }
            let gt_data = pred
                .data()
                .iter()
                .zip(gt.data())
                .map(|(&p, &g)| if p == UNCERTAIN { UNCERTAIN } else { g })
                .collect();
            let gt = SegMask::new(gt.width(), gt.height(), gt_data, gt.legend().to_vec())?;
            Ok((pred.with_uncertain_as(BACKGROUND), gt))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: String,
    pub container: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub uncertain_fraction: f64,
    /// Pixel fraction per label present in the mask (0 = background).
    pub class_coverage: BTreeMap<ClassId, f64>,
    /// Prompt classes that received no pixels.
    pub missing_classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub config: PipelineConfig,
    pub rows: Vec<ReportRow>,
}

impl GenerateReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok).count()
    }
}

/// Wall-clock timings, kept apart from the reproducible report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub per_image_ms: Vec<(String, f64)>,
    pub total_ms: f64,
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

fn coverage(mask: &SegMask) -> BTreeMap<ClassId, f64> {
    let mut counts: BTreeMap<ClassId, u64> = BTreeMap::new();
    for &v in mask.data() {
        if v != UNCERTAIN {
            *counts.entry(v).or_default() += 1;
        }
    }
    let total = mask.data().len().max(1) as f64;
    counts.into_iter().map(|(k, v)| (k, v as f64 / total)).collect()
}

fn generate_one(dir: &Path, out_dir: &Path, config: &PipelineConfig) -> (ReportRow, f64) {
    let started = Instant::now();
    let fallback_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut row = ReportRow {
        image_id: fallback_id,
        container: dir.display().to_string(),
        ok: false,
        error: None,
        mask: None,
        uncertain_fraction: 0.0,
        class_coverage: BTreeMap::new(),
        missing_classes: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let container = read_container(dir)?;
        row.image_id = container.manifest().image_id.clone();
        let mask = synthesize_mask(&container, config)?;
        let name = format!("{}.png", row.image_id);
        write_mask(&mask, out_dir.join(&name))?;
        if config.color_masks {
            write_color_mask(&mask, out_dir.join(format!("{}_color.png", row.image_id)))?;
        }
        row.uncertain_fraction = mask.uncertain_fraction();
        row.class_coverage = coverage(&mask);
        row.missing_classes = mask
            .legend()
            .iter()
            .copied()
            .filter(|c| !row.class_coverage.contains_key(c))
            .collect();
        row.mask = Some(name);
        Ok(())
    })();
    match result {
        Ok(()) => row.ok = true,
        Err(e) => row.error = Some(e.to_string()),
    }
    (row, started.elapsed().as_secs_f64() * 1e3)
}

/// Synthesizes one mask per container into `out_dir` using `workers`
/// threads. A failing container is reported and skipped. Rows keep input
/// order, so the report is independent of scheduling.
pub fn run_generate(
    config: &PipelineConfig,
    containers: &[PathBuf],
    out_dir: &Path,
    workers: usize,
) -> Result<(GenerateReport, TimingReport)> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(ReportRow, f64)> = pool.install(|| {
        containers
            .par_iter()
            .map(|dir| generate_one(dir, out_dir, config))
            .collect()
    });

    // Two containers claiming one image id would overwrite each other.
    let mut rows: Vec<ReportRow> = Vec::with_capacity(results.len());
    let mut seen = BTreeSet::new();
    let mut timings = Vec::with_capacity(results.len());
    for (mut row, ms) in results {
        if row.ok && !seen.insert(row.image_id.clone()) {
            row.ok = false;
            row.error = Some(format!("duplicate image id {}", row.image_id));
        }
        timings.push((row.image_id.clone(), ms));
        rows.push(row);
    }

    let report = GenerateReport {
        config: config.clone(),
        rows,
    };
    let timing = TimingReport {
        per_image_ms: timings,
        total_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    write_json(&out_dir.join(TIMING_FILE), &timing)?;
    Ok((report, timing))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// A fixture container with its ground truth.
#[derive(Debug, Clone)]
pub struct FixtureCase {
    pub container: Container,
    pub gt: SegMask,
}

pub const CONTAINERS_DIR: &str = "containers";
pub const GT_DIR: &str = "gt";
pub const SCENES_FILE: &str = "scenes.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Writes `scenes` as a fixture directory: one container per scene under
/// `containers/`, ground-truth PNGs under `gt/`, plus the scene list and
/// the vocabulary.
pub fn make_fixture_dir(scenes: &[SceneSpec], out: &Path) -> Result<Vec<FixtureCase>> {
    let gt_dir = out.join(GT_DIR);
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    let cases = scenes
        .iter()
        .map(|scene| {
            let container = fabricate_container(scene, out.join(CONTAINERS_DIR).join(&scene.image_id))?;
            let gt = render_gt(scene);
            write_mask(&gt, gt_dir.join(format!("{}.png", scene.image_id)))?;
            Ok(FixtureCase { container, gt })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join(SCENES_FILE), &scenes)?;
    write_json(&out.join(VOCAB_FILE), &ClassVocabulary::pascal_voc())?;
    Ok(cases)
}

/// Container directories under `dir/containers`, sorted by name.
pub fn fixture_container_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let root = dir.join(CONTAINERS_DIR);
    let mut dirs = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(&root, e)))
        .collect::<Result<Vec<_>>>()?;
    dirs.retain(|p| p.is_dir());
    dirs.sort();
    Ok(dirs)
}

pub fn load_fixture_dir(dir: &Path) -> Result<Vec<FixtureCase>> {
    fixture_container_dirs(dir)?
        .into_iter()
        .map(|path| {
            let container = read_container(&path)?;
            let gt = read_mask(
                dir.join(GT_DIR)
                    .join(format!("{}.png", container.manifest().image_id)),
            )?;
            Ok(FixtureCase { container, gt })
        })
        .collect()
}

fn label_space(cases: &[FixtureCase]) -> ClassId {
    cases
        .iter()
        .flat_map(|c| {
            c.gt.legend()
                .iter()
                .copied()
                .chain(c.container.manifest().class_ids())
        })
        .max()
        .unwrap_or(0)
}

/// Per-image mIoU of the synthesized mask against the fixture ground truth.
pub fn score_case(case: &FixtureCase, config: &PipelineConfig, max_class: ClassId) -> Result<(ConfusionMatrix, MiouReport)> {
    let pred = synthesize_mask(&case.container, config)?;
    let (pred, gt) = scorable(&pred, &case.gt, config.uncertain_scoring)?;
    let cm = confusion(&pred, &gt, max_class, UNCERTAIN)?;
    let report = miou(&cm, config.include_background)?;
    Ok((cm, report))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default)]
    pub taus: Vec<u32>,
    #[serde(default)]
    pub alpha_beta: Vec<(f32, f32)>,
    #[serde(default)]
    pub cross_scales: Vec<u16>,
    #[serde(default)]
    pub self_scales: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub tau: u32,
    pub alpha: f32,
    pub beta: f32,
    pub cross_scale: u16,
    pub self_scale: u16,
}

impl AblationGrid {
    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
            && self.alpha_beta.is_empty()
            && self.cross_scales.is_empty()
            && self.self_scales.is_empty()
    }

    /// Cartesian product; an empty axis contributes the base value.
    pub fn cells(&self, base: &PipelineConfig) -> Vec<AblationCell> {
        fn or<T: Copy>(axis: &[T], default: T) -> Vec<T> {
            if axis.is_empty() {
                vec![default]
            } else {
                axis.to_vec()
            }
        }
        let mut out = Vec::new();
        for &cross_scale in &or(&self.cross_scales, base.cross_scale) {
            for &self_scale in &or(&self.self_scales, base.self_scale) {
                for &tau in &or(&self.taus, base.tau) {
                    for &(alpha, beta) in &or(&self.alpha_beta, (base.alpha, base.beta)) {
                        out.push(AblationCell {
                            tau,
                            alpha,
                            beta,
                            cross_scale,
                            self_scale,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// mIoU of the merged confusion matrix over all fixtures.
    pub miou: Option<f64>,
    /// Mean of per-image mIoU.
    pub mean_image_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = String::from("cross  self  tau  alpha-beta   mIoU(%)  img-mIoU(%)\n");
        for r in &self.rows {
            let pct = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |v| format!("{:5.1}", v * 100.0));
            out.push_str(&format!(
                "{:>5}  {:>4}  {:>3}  {:.2}-{:.2}    {}    {}",
                r.cell.cross_scale,
                r.cell.self_scale,
                r.cell.tau,
                r.cell.alpha,
                r.cell.beta,
                pct(r.miou),
                pct(r.mean_image_miou)
            ));
            if let Some(note) = &r.note {
                out.push_str(&format!("  ({note})"));
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every grid cell over the fixture set. Cells that cannot run are
/// kept in the table with a note.
pub fn run_ablation(grid: &AblationGrid, base: &PipelineConfig, fixtures: &[FixtureCase]) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid has no axes".into()));
    }
    let max_class = label_space(fixtures);
    let rows = grid
        .cells(base)
        .into_iter()
        .map(|cell| {
            let config = PipelineConfig {
                tau: cell.tau,
                alpha: cell.alpha,
                beta: cell.beta,
                cross_scale: cell.cross_scale,
                self_scale: cell.self_scale,
                ..base.clone()
            };
            let scored = config.validate().and_then(|_| {
                let per_case = fixtures
                    .par_iter()
                    .map(|case| score_case(case, &config, max_class))
                    .collect::<Result<Vec<_>>>()?;
                let mut total = ConfusionMatrix::new(max_class);
                for (cm, _) in &per_case {
                    total.merge(cm)?;
                }
                let pooled = miou(&total, config.include_background)?.mean;
                let mean = per_case.iter().map(|(_, r)| r.mean).sum::<f64>() / per_case.len().max(1) as f64;
                Ok((pooled, mean))
            });
            match scored {
                Ok((pooled, mean)) => AblationRow {
                    cell,
                    miou: Some(pooled),
                    mean_image_miou: Some(mean),
                    note: None,
                },
                Err(e) => AblationRow {
                    cell,
                    miou: None,
                    mean_image_miou: None,
                    note: Some(format!("skipped: {e}")),
                },
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: ClassId,
    pub name: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub ignored_pixels: u64,
    pub classes: Vec<ClassScore>,
    pub mean_iou: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  IoU(%)\n", "class");
        for c in &self.classes {
            out.push_str(&format!("{:<width$}  {:6.1}\n", c.name, c.iou * 100.0));
        }
        out.push_str(&format!("{:<width$}  {:6.1}\n", "mIoU", self.mean_iou * 100.0));
        out
    }
}

/// Scores every `*.png` in `gt_dir` against the same-named file in
/// `pred_dir`.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    vocab: &ClassVocabulary,
    include_background: bool,
    uncertain: Option<UncertainScoring>,
) -> Result<EvalReport> {
    let mut names: Vec<PathBuf> = fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    let max_class = vocab.max_id();
    let mut total = ConfusionMatrix::new(max_class);
    for gt_path in &names {
        let file = gt_path.file_name().expect("listed file");
        let gt = read_mask(gt_path)?;
        let pred = read_mask(pred_dir.join(file))?;
        let (pred, gt) = match uncertain {
            Some(policy) => scorable(&pred, &gt, policy)?,
            None => (pred, gt),
        };
        total.merge(&confusion(&pred, &gt, max_class, UNCERTAIN)?)?;
    }
    let report = miou(&total, include_background)?;
    let classes = report
        .per_class
        .iter()
        .map(|(&id, &iou)| ClassScore {
            class_id: id,
            name: if id == BACKGROUND {
                "background".to_string()
            } else {
                vocab.name(id).map(str::to_string).unwrap_or_else(|_| id.to_string())
            },
            iou,
        })
        .collect();
    Ok(EvalReport {
        images: names.len(),
        ignored_pixels: total.ignored(),
        classes,
        mean_iou: report.mean,
    })
}
