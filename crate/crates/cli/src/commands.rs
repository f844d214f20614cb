use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use pseudolabel::correction::{
    correct_with_weight, Confusion, Distribution, ExternalClassifier, ExternalQuery, FusionState, MockClassifierConfig,
    MockExternalClassifier,
};
use pseudolabel::eval::{
    categorize_errors, confusion_matrix, score_iou_table, simplified_ap, ErrorCategory, ScoredMask, Taxonomy,
};
use pseudolabel::filtering::{filter_predictions, FilterConfig, RejectReason};
use pseudolabel::gradcheck::PmuaProblem;
use pseudolabel::instance::{binarize, mask_iou, softmax, InstancePrediction};
use pseudolabel::io::{self, format_g9, GroundTruthFile, NamedPrediction, PredictionFile};
use pseudolabel::loss::{
    match_predictions, supervised_terms, total_loss, unsupervised_terms, CostWeights, LossConfig, LossTerms, PseudoLabel,
};
use pseudolabel::matching::MatchResult;
use pseudolabel::quality::{uncertainty_map, QualityScores};
use pseudolabel::sim::noise::{corrupt_predictions, ChannelKind, NoiseChannel};
use pseudolabel::sim::scene::{generate_scene, SceneConfig};
use pseudolabel::sim::trainer::{run_training, TrainerConfig, Variant};

use crate::GlobalArgs;

fn filter_config(g: &GlobalArgs, base: FilterConfig) -> FilterConfig {
    FilterConfig {
        mode: g.filter_mode.unwrap_or(base.mode),
        mask_threshold: g.mask_threshold.unwrap_or(base.mask_threshold),
        class_threshold: g.class_threshold.unwrap_or(base.class_threshold),
        coupled_threshold: g.coupled_threshold.unwrap_or(base.coupled_threshold),
    }
}

fn out(g: &GlobalArgs, name: &str) -> PathBuf {
    g.output_dir.join(name)
}

fn read_predictions(path: &Path) -> Result<PredictionFile> {
    PredictionFile::read(path).with_context(|| format!("reading predictions {}", path.display()))
}

pub fn score(g: &GlobalArgs, predictions: &Path) -> Result<ExitCode> {
    let file = read_predictions(predictions)?;
    let rows: Vec<Vec<String>> = file
        .instances
        .iter()
        .map(|inst| {
            let s = QualityScores::of(&inst.prediction);
            vec![
                inst.id.clone(),
                inst.prediction.class_logits.argmax().to_string(),
                format_g9(s.class_quality),
                format_g9(s.mask_quality),
                format_g9(s.coupled_score),
            ]
        })
        .collect();
    let path = out(g, "scores.csv");
    io::write_csv(
        &path,
        &["instance_id", "predicted_class", "class_quality", "mask_quality", "coupled_score"],
        &rows,
    )?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct FilterEntry<'a> {
    index: usize,
    id: &'a str,
    #[serde(flatten)]
    scores: QualityScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<RejectReason>,
}

#[derive(Debug, Serialize)]
struct FilterOutput<'a> {
    image_id: &'a str,
    config: FilterConfig,
    kept: Vec<FilterEntry<'a>>,
    rejected: Vec<FilterEntry<'a>>,
}

pub fn filter(g: &GlobalArgs, predictions: &Path) -> Result<ExitCode> {
    let file = read_predictions(predictions)?;
    let config = filter_config(g, FilterConfig::default());
    config.validate()?;
    let set = filter_predictions(&file.predictions(), &config);
    let id = |i: usize| file.instances[i].id.as_str();
    let doc = FilterOutput {
        image_id: &file.image_id,
        config,
        kept: set
            .kept
            .iter()
            .map(|k| FilterEntry {
                index: k.index,
                id: id(k.index),
                scores: k.scores,
                reason: None,
            })
            .collect(),
        rejected: set
            .rejected
            .iter()
            .map(|r| FilterEntry {
                index: r.index,
                id: id(r.index),
                scores: r.scores,
                reason: Some(r.reason),
            })
            .collect(),
    };
    let path = out(g, "filtered.json");
    io::write_versioned(&path, &doc)?;
    println!("kept {} of {} instances; wrote {}", doc.kept.len(), file.instances.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    predictions: PathBuf,
    /// Precomputed external distributions keyed by instance id.
    #[arg(long, conflicts_with_all = ["mock_accuracy", "mock_confusion"])]
    external: Option<PathBuf>,
    /// Mock classifier accuracy (used when no --external file is given).
    #[arg(long, default_value_t = 0.8)]
    mock_accuracy: f64,
    /// `uniform`, or a JSON file holding an N x N confusion matrix.
    #[arg(long, default_value = "uniform")]
    mock_confusion: String,
    /// Ground truth telling the mock which class each instance shows
    /// (best IoU above 0.5); instances without one look like background.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    it_cur: u64,
    #[arg(long, default_value_t = 1)]
    it_max: u64,
}

#[derive(Debug, Serialize)]
struct CorrectionEntry<'a> {
    id: &'a str,
    teacher_class: usize,
    corrected_class: usize,
    fused: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct CorrectionOutput<'a> {
    image_id: &'a str,
    it_cur: u64,
    it_max: u64,
    fusion_weight: f64,
    corrections: Vec<CorrectionEntry<'a>>,
}

fn source_classes(file: &PredictionFile, gt: Option<&GroundTruthFile>) -> Result<Vec<Option<usize>>> {
    let Some(gt) = gt else {
        return Ok(vec![None; file.instances.len()]);
    };
    file.instances
        .iter()
        .map(|inst| {
            let mask = binarize(&inst.prediction.mask_logits, 0.5);
            let mut best: Option<(f64, usize)> = None;
            for g in &gt.instances {
                let iou = mask_iou(&mask, &g.mask)?;
                if iou > 0.5 && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g.class_id));
                }
            }
            Ok(best.map(|(_, c)| c))
        })
        .collect()
}

pub fn correct(g: &GlobalArgs, args: &CorrectArgs) -> Result<ExitCode> {
    let file = read_predictions(&args.predictions)?;
    let state = FusionState::new(args.it_cur, args.it_max)?;
    let w = state.weight();
    let gt = args.ground_truth.as_deref().map(GroundTruthFile::read).transpose()?;
    let sources = source_classes(&file, gt.as_ref())?;
    let classifier: Box<dyn ExternalClassifier> = match &args.external {
        Some(path) => Box::new(io::read_external_responses(path)?),
        None => {
            let confusion = if args.mock_confusion == "uniform" {
                Confusion::Uniform
            } else {
                let text = fs::read_to_string(&args.mock_confusion)
                    .with_context(|| format!("reading confusion matrix {}", args.mock_confusion))?;
                Confusion::Matrix(serde_json::from_str(&text).with_context(|| format!("parsing {}", args.mock_confusion))?)
            };
            Box::new(MockExternalClassifier::new(MockClassifierConfig {
                num_classes: file.num_classes(),
                accuracy: args.mock_accuracy,
                confusion,
                miss_rate: 0.0,
                seed: g.seed,
            })?)
        }
    };
    let mut corrections = Vec::with_capacity(file.instances.len());
    for (inst, source) in file.instances.iter().zip(sources) {
        let teacher = Distribution::new(softmax(&inst.prediction.class_logits))?;
        let external = classifier.classify(&ExternalQuery {
            instance_id: inst.id.clone(),
            source_class: source,
            vocabulary: &file.class_names,
        })?;
        let c = correct_with_weight(&teacher, &external, w)?;
        corrections.push(CorrectionEntry {
            id: &inst.id,
            teacher_class: teacher.argmax(),
            corrected_class: c.class_id,
            fused: c.fused.probs().to_vec(),
        });
    }
    let changed = corrections.iter().filter(|c| c.teacher_class != c.corrected_class).count();
    let path = out(g, "corrections.json");
    io::write_versioned(
        &path,
        &CorrectionOutput {
            image_id: &file.image_id,
            it_cur: args.it_cur,
            it_max: args.it_max,
            fusion_weight: w,
            corrections,
        },
    )?;
    println!("w = {w}; changed {changed} classes; wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    /// Student predictions.
    predictions: PathBuf,
    /// Ground-truth targets.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Teacher predictions turned into pseudo-labels (argmax class, mask at 0.5,
    /// per-pixel uncertainty).
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Matching cost weights `class,bce,dice`.
    #[arg(long, default_value = "1,1,1", value_parser = parse_weights)]
    cost_weights: CostWeights,
}

fn parse_weights(s: &str) -> std::result::Result<CostWeights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [class, bce, dice] = v[..] else {
        return Err("expected three comma-separated weights".into());
    };
    let w = CostWeights { class, bce, dice };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

fn pseudo_labels(path: &Path) -> Result<Vec<PseudoLabel>> {
    let file = read_predictions(path)?;
    file.instances
        .iter()
        .map(|inst| {
            let p = &inst.prediction;
            Ok(PseudoLabel::new(
                p.class_logits.argmax(),
                binarize(&p.mask_logits, 0.5),
                uncertainty_map(&p.mask_logits),
            )?)
        })
        .collect()
}

fn gt_targets(path: &Path) -> Result<Vec<PseudoLabel>> {
    let gt = GroundTruthFile::read(path)?;
    Ok(gt.instances.iter().map(PseudoLabel::certain).collect())
}

fn targets(args: &TargetArgs) -> Result<Vec<PseudoLabel>> {
    match (&args.ground_truth, &args.pseudo) {
        (Some(gt), None) => gt_targets(gt),
        (None, Some(p)) => pseudo_labels(p),
        _ => bail!("give exactly one of --ground-truth or --pseudo"),
    }
}

pub fn matching(g: &GlobalArgs, args: &TargetArgs) -> Result<ExitCode> {
    let students = read_predictions(&args.predictions)?.predictions();
    let targets = targets(args)?;
    let result = match_predictions(&students, &targets, &args.cost_weights)?;
    let path = out(g, "match.json");
    io::write_versioned(&path, &result)?;
    println!("matched {} pairs, total cost {}; wrote {}", result.len(), result.total_cost, path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Student predictions.
    predictions: PathBuf,
    /// Ground truth for the supervised term.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Teacher predictions for the unsupervised term.
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Add the dice term.
    #[arg(long)]
    dice: bool,
    #[arg(long, default_value = "1,1,1", value_parser = parse_weights)]
    cost_weights: CostWeights,
}

#[derive(Debug, Serialize)]
struct LossPart {
    terms: LossTerms,
    total: f64,
    matching: MatchResult,
}

#[derive(Debug, Serialize)]
struct LossOutput {
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    supervised: Option<LossPart>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unsupervised: Option<LossPart>,
    total: f64,
}

pub fn loss(g: &GlobalArgs, args: &LossArgs) -> Result<ExitCode> {
    if args.ground_truth.is_none() && args.pseudo.is_none() {
        bail!("give --ground-truth, --pseudo or both");
    }
    let config = LossConfig {
        lambda: g.lambda.unwrap_or(1.0),
        dice_enabled: args.dice,
        cost_weights: args.cost_weights,
        ..LossConfig::default()
    };
    config.validate()?;
    let students = read_predictions(&args.predictions)?.predictions();
    let part = |targets: Vec<PseudoLabel>, unsup: bool| -> Result<LossPart> {
        let matching = match_predictions(&students, &targets, &config.cost_weights)?;
        let (terms, _) = if unsup {
            unsupervised_terms(&students, &targets, &matching, &config)?
        } else {
            supervised_terms(&students, &targets, &matching, &config)?
        };
        if !terms.is_finite() {
            return Err(pseudolabel::Error::NonFinite(format!("loss terms {terms:?}")).into());
        }
        Ok(LossPart {
            total: terms.total(),
            terms,
            matching,
        })
    };
    let supervised = args.ground_truth.as_deref().map(|p| part(gt_targets(p)?, false)).transpose()?;
    let unsupervised = args.pseudo.as_deref().map(|p| part(pseudo_labels(p)?, true)).transpose()?;
    let total = total_loss(
        supervised.as_ref().map_or(0.0, |p| p.total),
        unsupervised.as_ref().map_or(0.0, |p| p.total),
        config.lambda,
    );
    let path = out(g, "loss.json");
    io::write_versioned(
        &path,
        &LossOutput {
            lambda: config.lambda,
            supervised,
            unsupervised,
            total,
        },
    )?;
    println!("total loss {total}; wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    /// Feature dimension of the linear pixel model.
    #[arg(long, default_value_t = 3)]
    dim: usize,
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    seed: u64,
    instances: usize,
    step: f64,
    tolerance: f64,
    max_relative_error: f64,
    passed: bool,
}

pub fn gradcheck(g: &GlobalArgs, args: &GradcheckArgs) -> Result<ExitCode> {
    if args.instances == 0 || !(args.step > 0.0) {
        bail!("need at least one instance and a positive step");
    }
    let mut worst: f64 = 0.0;
    for i in 0..args.instances {
        let seed = g.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let problem = PmuaProblem::random(seed, args.height, args.width, args.dim)?;
        let e = problem.check(args.step)?.max_relative_error;
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    let passed = worst <= args.tolerance;
    let path = out(g, "gradcheck.json");
    io::write_versioned(
        &path,
        &GradcheckOutput {
            seed: g.seed,
            instances: args.instances,
            step: args.step,
            tolerance: args.tolerance,
            max_relative_error: worst,
            passed,
        },
    )?;
    println!("max relative error {} over {} instances ({})", format_g9(worst), args.instances, if passed { "ok" } else { "FAILED" });
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

/// Benchmark description for `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub scene: SceneConfig,
    pub num_scenes: usize,
    /// Noise applied to ground truth to produce the predictions.
    pub channel: NoiseChannel,
    /// Scene seeds; when empty, `seed + i` for `i < num_scenes`.
    pub seeds: Vec<u64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            num_scenes: 10,
            channel: NoiseChannel {
                kind: ChannelKind::Strong,
                noise_std: 2.0,
                class_confusion: 0.1,
                dropout: 0.0,
            },
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub predictions: String,
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

pub fn simulate(g: &GlobalArgs, config: Option<&Path>) -> Result<ExitCode> {
    let config: SimulationConfig = match config {
        Some(p) => io::read_versioned(p)?,
        None => SimulationConfig::default(),
    };
    config.scene.validate()?;
    config.channel.validate()?;
    let seeds: Vec<u64> = if config.seeds.is_empty() {
        (0..config.num_scenes as u64).map(|i| g.seed.wrapping_add(i)).collect()
    } else {
        config.seeds.clone()
    };
    let class_names: Vec<String> = (0..config.scene.num_classes).map(|c| format!("class_{c}")).collect();
    let mut scenes = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let scene = generate_scene(seed, &config.scene)?;
        let image_id = format!("scene_{i:04}");
        let preds = corrupt_predictions(&scene, &config.channel, g.seed)?;
        let pred_name = format!("{image_id}_pred.json");
        let gt_name = format!("{image_id}_gt.json");
        PredictionFile {
            image_id: image_id.clone(),
            height: scene.height,
            width: scene.width,
            class_names: class_names.clone(),
            instances: preds
                .into_iter()
                .enumerate()
                .map(|(k, prediction)| NamedPrediction {
                    id: format!("{image_id}:{k}"),
                    prediction,
                })
                .collect(),
        }
        .write(&out(g, &pred_name))?;
        GroundTruthFile {
            image_id: image_id.clone(),
            height: scene.height,
            width: scene.width,
            num_classes: scene.num_classes(),
            instances: scene.instances.clone(),
        }
        .write(&out(g, &gt_name))?;
        scenes.push(ManifestEntry {
            image_id,
            predictions: pred_name,
            ground_truth: gt_name,
        });
    }
    let path = out(g, "manifest.json");
    io::write_versioned(&path, &Manifest { scenes })?;
    println!("wrote {} scenes; manifest {}", seeds.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trainer configuration JSON; defaults to the standard benchmark.
    config: Option<PathBuf>,
    /// Module ablation applied on top of the configuration.
    #[arg(long, default_value = "full")]
    variant: Variant,
}

#[derive(Debug, Serialize)]
struct TrainMetrics<'a> {
    variant: &'a str,
    config: &'a TrainerConfig,
    #[serde(flatten)]
    outcome: &'a pseudolabel::sim::trainer::RunOutcome,
}

pub fn train(g: &GlobalArgs, args: &TrainArgs) -> Result<ExitCode> {
    let mut config: TrainerConfig = match &args.config {
        Some(p) => io::read_versioned(p)?,
        None => TrainerConfig::default(),
    };
    config.schedule.seed = g.seed;
    config.filter = filter_config(g, config.filter);
    if let Some(l) = g.lambda {
        config.loss.lambda = l;
    }
    if let Some(a) = g.ema_alpha {
        config.ema.alpha = a;
    }
    let config = args.variant.apply(&config);
    config.validate()?;
    let outcome = run_training(&config)?;

    let log_path = out(g, "train_log.jsonl");
    let mut log = Vec::new();
    for record in &outcome.log {
        serde_json::to_writer(&mut log, record)?;
        log.push(b'\n');
    }
    io::write_file(&log_path, &log)?;
    let metrics_path = out(g, "metrics.json");
    io::write_versioned(
        &metrics_path,
        &TrainMetrics {
            variant: args.variant.name(),
            config: &config,
            outcome: &outcome,
        },
    )?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "teacher mIoU {:.3} (after burn-in {:.3}); pseudo-label precision {}",
        outcome.teacher.miou,
        outcome.burn_in.miou,
        outcome.pseudo_precision.map_or("n/a".to_string(), format_g9)
    )?;
    writeln!(stdout, "wrote {} and {}", log_path.display(), metrics_path.display())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Manifest listing prediction and ground-truth files, as written by `simulate`.
    manifest: PathBuf,
    /// Superclass mapping; defaults to one superclass per class.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
}

#[derive(Debug, Serialize)]
struct AnalyzeSummary {
    images: usize,
    predictions: usize,
    errors: std::collections::BTreeMap<&'static str, usize>,
    corr_coupled: Option<f64>,
    corr_class: Option<f64>,
    corr_mask: Option<f64>,
    /// Mean over images of the simplified AP at the IoU threshold.
    mean_ap: f64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn analyze(g: &GlobalArgs, args: &AnalyzeArgs) -> Result<ExitCode> {
    let manifest: Manifest = io::read_versioned(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let mut score_rows = Vec::new();
    let mut error_rows = Vec::new();
    let mut all_preds: Vec<InstancePrediction> = Vec::new();
    let mut all_gt_iou = Vec::new();
    let mut histogram = [0usize; 5];
    let mut confusion: Option<Vec<Vec<usize>>> = None;
    let mut ap_sum = 0.0;
    let mut taxonomy: Option<Taxonomy> = None;
    for entry in &manifest.scenes {
        let preds = read_predictions(&base.join(&entry.predictions))?;
        let gt = GroundTruthFile::read(&base.join(&entry.ground_truth))?;
        let n = gt.num_classes;
        if preds.num_classes() != n {
            bail!("{}: {} classes in predictions, {} in ground truth", entry.image_id, preds.num_classes(), n);
        }
        let tax = match &taxonomy {
            Some(t) => t.clone(),
            None => {
                let t = match &args.taxonomy {
                    Some(p) => io::read_taxonomy(p, n)?,
                    None => Taxonomy::flat(n),
                };
                taxonomy = Some(t.clone());
                t
            }
        };
        let p = preds.predictions();
        let table = score_iou_table(&p, &gt.instances)?;
        for (row, inst) in table.rows.iter().zip(&preds.instances) {
            score_rows.push(vec![
                entry.image_id.clone(),
                inst.id.clone(),
                format_g9(row.class_quality),
                format_g9(row.mask_quality),
                format_g9(row.coupled_score),
                format_g9(row.best_iou),
            ]);
            all_gt_iou.push(row.best_iou);
        }
        let scored: Vec<ScoredMask> = p.iter().map(ScoredMask::from_prediction).collect();
        let report = categorize_errors(&scored, &gt.instances, &tax, args.iou_threshold)?;
        for (cat, inst) in report.categories.iter().zip(&preds.instances) {
            error_rows.push(vec![entry.image_id.clone(), inst.id.clone(), cat.name().to_string()]);
        }
        for (h, c) in histogram.iter_mut().zip(report.histogram) {
            *h += c;
        }
        let m = confusion_matrix(&scored, &gt.instances, n)?;
        match &mut confusion {
            Some(acc) => {
                if acc.len() != m.len() {
                    bail!("{}: class count differs between images", entry.image_id);
                }
                for (ra, rb) in acc.iter_mut().zip(&m) {
                    for (a, b) in ra.iter_mut().zip(rb) {
                        *a += b;
                    }
                }
            }
            None => confusion = Some(m),
        }
        ap_sum += simplified_ap(&scored, &gt.instances, args.iou_threshold)?;
        all_preds.extend(p);
    }

    io::write_csv(
        &out(g, "score_iou.csv"),
        &["image_id", "instance_id", "class_quality", "mask_quality", "coupled_score", "best_iou"],
        &score_rows,
    )?;
    io::write_csv(&out(g, "errors.csv"), &["image_id", "instance_id", "category"], &error_rows)?;
    let confusion = confusion.unwrap_or_default();
    let n = confusion.len().saturating_sub(1);
    let mut header: Vec<String> = vec!["true\\predicted".into()];
    header.extend((0..n).map(|c| format!("class_{c}")));
    header.push("background".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = confusion
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let mut v = vec![if r == n { "background".to_string() } else { format!("class_{r}") }];
            v.extend(row.iter().map(|c| c.to_string()));
            v
        })
        .collect();
    io::write_csv(&out(g, "confusion.csv"), &header_refs, &rows)?;

    let column = |f: fn(&QualityScores) -> f64| all_preds.iter().map(|p| f(&QualityScores::of(p))).collect::<Vec<_>>();
    let summary = AnalyzeSummary {
        images: manifest.scenes.len(),
        predictions: all_preds.len(),
        errors: ErrorCategory::ALL.iter().map(|c| c.name()).zip(histogram).collect(),
        corr_coupled: finite(pseudolabel::eval::pearson(&column(|s| s.coupled_score), &all_gt_iou)),
        corr_class: finite(pseudolabel::eval::pearson(&column(|s| s.class_quality), &all_gt_iou)),
        corr_mask: finite(pseudolabel::eval::pearson(&column(|s| s.mask_quality), &all_gt_iou)),
        mean_ap: if manifest.scenes.is_empty() { 0.0 } else { ap_sum / manifest.scenes.len() as f64 },
    };
    io::write_versioned(&out(g, "summary.json"), &summary)?;
    println!(
        "analyzed {} predictions over {} images; mean AP {}; wrote CSVs to {}",
        summary.predictions,
        summary.images,
        format_g9(summary.mean_ap),
        g.output_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
