//! Burn-in, teacher-student mutual learning and evaluation on synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{
    correct_with_weight, Confusion, Distribution, ExternalClassifier, ExternalQuery, FusionState, MockClassifierConfig,
    MockExternalClassifier,
};
use crate::error::{Error, Result};
use crate::filtering::{filter_predictions, FilterConfig, FilterMode};
use crate::instance::{binarize, mask_iou, sigmoid, softmax, GroundTruthInstance};
use crate::loss::{match_predictions, supervised_terms, unsupervised_terms, LossConfig, LossTerms, PseudoLabel};
use crate::quality::{uncertainty_map, UncertaintyMap};
use crate::sim::model::{drop_proposals, make_proposals, noisy_view, Proposal, ProposalConfig, ToyModel};
use crate::sim::noise::{ChannelKind, NoiseChannel};
use crate::sim::scene::{generate_scene, SceneConfig, SyntheticScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.9996 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("ema alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("ema alpha must lie in [0, 1]"));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub burn_in_iters: u64,
    /// Total iterations including burn-in.
    pub max_iters: u64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Step size of the class head.
    pub learning_rate: f64,
    /// Step size of the mask head, whose per-pixel loss is averaged over the
    /// whole grid and so yields much smaller gradients.
    pub mask_learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            burn_in_iters: 100,
            max_iters: 1000,
            labeled_batch: 1,
            unlabeled_batch: 2,
            learning_rate: 2.0,
            mask_learning_rate: 20.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in_iters == 0 {
            return Err(Error::invalid("burn_in_iters must be at least 1"));
        }
        if self.burn_in_iters >= self.max_iters {
            return Err(Error::invalid("burn_in_iters must be smaller than max_iters"));
        }
        if self.labeled_batch == 0 {
            return Err(Error::invalid("labeled_batch must be at least 1"));
        }
        for lr in [self.learning_rate, self.mask_learning_rate] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::invalid("learning rates must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub scene: SceneConfig,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub num_test: usize,
    pub proposals: ProposalConfig,
    pub weak: NoiseChannel,
    pub strong: NoiseChannel,
    pub schedule: TrainSchedule,
    pub filter: FilterConfig,
    pub correction_enabled: bool,
    pub uncertainty_enabled: bool,
    pub external: MockClassifierConfig,
    pub loss: LossConfig,
    pub ema: EmaConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            num_labeled: 4,
            num_unlabeled: 40,
            num_test: 20,
            proposals: ProposalConfig::default(),
            weak: NoiseChannel::default_weak(),
            strong: NoiseChannel::default_strong(),
            schedule: TrainSchedule::default(),
            filter: FilterConfig::default(),
            correction_enabled: true,
            uncertainty_enabled: true,
            external: MockClassifierConfig {
                num_classes: scene.num_classes,
                accuracy: 0.95,
                confusion: Confusion::Uniform,
                miss_rate: 0.05,
                seed: 0,
            },
            loss: LossConfig::default(),
            ema: EmaConfig::default(),
            scene,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        NoiseChannel::validate_pair(&self.weak, &self.strong)?;
        self.schedule.validate()?;
        self.filter.validate()?;
        self.loss.validate()?;
        self.ema.validate()?;
        if self.num_labeled == 0 || self.num_test == 0 {
            return Err(Error::invalid("num_labeled and num_test must be positive"));
        }
        if self.schedule.unlabeled_batch > 0 && self.num_unlabeled == 0 {
            return Err(Error::invalid("unlabeled_batch > 0 needs unlabeled scenes"));
        }
        if self.external.num_classes != self.scene.num_classes {
            return Err(Error::invalid("external classifier and scenes disagree on the class count"));
        }
        MockExternalClassifier::new(self.external.clone())?;
        Ok(())
    }
}

/// The module toggles compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Coupled `c * m` filtering instead of the dual threshold.
    NoDdtf,
    /// Teacher argmax instead of fused classes.
    NoDicc,
    /// Unweighted BCE on pseudo-masks (`u = 0`).
    NoPmua,
    /// All three removed.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoDdtf, Variant::NoDicc, Variant::NoPmua, Variant::Baseline];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDdtf => "no_ddtf",
            Variant::NoDicc => "no_dicc",
            Variant::NoPmua => "no_pmua",
            Variant::Baseline => "baseline",
        }
    }

    pub fn apply(&self, config: &TrainerConfig) -> TrainerConfig {
        let mut out = config.clone();
        let coupled = FilterConfig {
            mode: FilterMode::Coupled,
            ..config.filter
        };
        match self {
            Variant::Full => {}
            Variant::NoDdtf => out.filter = coupled,
            Variant::NoDicc => out.correction_enabled = false,
            Variant::NoPmua => out.uncertainty_enabled = false,
            Variant::Baseline => {
                out.filter = coupled;
                out.correction_enabled = false;
                out.uncertainty_enabled = false;
            }
        }
        out
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Labeled, unlabeled and test scenes of one benchmark seed.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub labeled: Vec<SyntheticScene>,
    pub unlabeled: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

fn scene_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split << 56) ^ index as u64
}

impl Benchmark {
    pub fn generate(seed: u64, config: &TrainerConfig) -> Result<Self> {
        let split = |tag: u64, n: usize| -> Result<Vec<SyntheticScene>> {
            (0..n)
                .map(|i| {
                    let mut s = generate_scene(scene_seed(seed, tag, i), &config.scene)?;
                    s.id = tag * 1_000_000 + i as u64;
                    Ok(s)
                })
                .collect()
        };
        Ok(Self {
            labeled: split(1, config.num_labeled)?,
            unlabeled: split(2, config.num_unlabeled)?,
            test: split(3, config.num_test)?,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub phase: Phase,
    /// Fusion weight used for category correction; `None` during burn-in.
    pub fusion_weight: Option<f64>,
    pub supervised: LossTerms,
    pub unsupervised: LossTerms,
    pub total_loss: f64,
    pub candidates: usize,
    pub kept: usize,
    pub rejected: usize,
    /// Kept pseudo-labels whose class was changed by correction.
    pub corrected: usize,
    /// Kept pseudo-labels with IoU > 0.5 and the right class.
    pub true_positive: usize,
    pub ground_truth: usize,
    /// Ground-truth instances covered by such a pseudo-label.
    pub covered: usize,
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BurnIn,
    Mutual,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Trainer state: both models plus independent RNG streams for labeled and
/// unlabeled sampling, so that disabling the unlabeled branch leaves the
/// labeled trajectory untouched.
pub struct Trainer<'a> {
    config: &'a TrainerConfig,
    data: &'a Benchmark,
    external: MockExternalClassifier,
    vocabulary: Vec<String>,
    pub teacher: ToyModel,
    pub student: ToyModel,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    iteration: u64,
    pub log: Vec<IterationLog>,
}

struct Batch {
    terms: LossTerms,
    grad: Vec<f64>,
}

#[derive(Default)]
struct PseudoStats {
    candidates: usize,
    kept: usize,
    corrected: usize,
    true_positive: usize,
    ground_truth: usize,
    covered: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainerConfig, data: &'a Benchmark) -> Result<Self> {
        config.validate()?;
        let seed = config.schedule.seed;
        let teacher = ToyModel::init(config.scene.num_classes, seed ^ 0x5EED);
        let external = MockExternalClassifier::new(MockClassifierConfig {
            seed: config.external.seed ^ seed,
            ..config.external.clone()
        })?;
        Ok(Self {
            config,
            data,
            external,
            vocabulary: (0..config.scene.num_classes).map(|c| format!("class_{c}")).collect(),
            student: teacher.clone(),
            teacher,
            labeled_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x1AB)),
            unlabeled_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x2CD)),
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn labeled_batch(&mut self, model: &ToyModel) -> Result<Batch> {
        let cfg = self.config;
        let n = cfg.schedule.labeled_batch;
        let mut terms = LossTerms::default();
        let mut grad = vec![0.0; model.num_params()];
        for _ in 0..n {
            let scene = &self.data.labeled[self.labeled_rng.random_range(0..self.data.labeled.len())];
            let proposals = make_proposals(scene, &cfg.proposals, false, &mut self.labeled_rng);
            let view = noisy_view(scene, &cfg.strong, &mut self.labeled_rng);
            let targets: Vec<PseudoLabel> = scene.instances.iter().map(PseudoLabel::certain).collect();
            let fwd = model.forward(scene, &view, &proposals)?;
            let matching = match_predictions(&fwd.predictions, &targets, &cfg.loss.cost_weights)?;
            let (t, g) = supervised_terms(&fwd.predictions, &targets, &matching, &cfg.loss)?;
            terms.class += t.class / n as f64;
            terms.mask += t.mask / n as f64;
            terms.dice += t.dice / n as f64;
            model.backward(&fwd, &g, 1.0 / n as f64, &mut grad);
        }
        Ok(Batch { terms, grad })
    }

    fn sgd(&mut self, grad: &[f64]) -> Result<()> {
        let schedule = &self.config.schedule;
        let split = self.student.mask.dim();
        let mut p = self.student.params();
        for (i, (v, g)) in p.iter_mut().zip(grad).enumerate() {
            let lr = if i < split { schedule.mask_learning_rate } else { schedule.learning_rate };
            *v -= lr * g;
        }
        self.student.set_params(&p)
    }

    fn check_finite(&self, terms: &LossTerms, grad: &[f64]) -> Result<()> {
        if !terms.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss diverged at iteration {} (class {}, mask {}, dice {})",
                self.iteration, terms.class, terms.mask, terms.dice
            )));
        }
        Ok(())
    }

    /// Supervised-only training of the teacher; the student becomes a copy of
    /// it afterwards.
    pub fn run_burn_in(&mut self) -> Result<()> {
        if self.iteration != 0 {
            return Err(Error::invalid("burn-in must run first"));
        }
        // Burn-in trains the student slot, which is the model that takes
        // gradient steps, then hands the weights to the teacher.
        self.student = self.teacher.clone();
        for _ in 0..self.config.schedule.burn_in_iters {
            let model = self.student.clone();
            let batch = self.labeled_batch(&model)?;
            self.check_finite(&batch.terms, &batch.grad)?;
            self.sgd(&batch.grad)?;
            self.log.push(IterationLog {
                iteration: self.iteration,
                phase: Phase::BurnIn,
                fusion_weight: None,
                supervised: batch.terms,
                unsupervised: LossTerms::default(),
                total_loss: batch.terms.total(),
                candidates: 0,
                kept: 0,
                rejected: 0,
                corrected: 0,
                true_positive: 0,
                ground_truth: 0,
                covered: 0,
                pseudo_precision: None,
                pseudo_recall: None,
            });
            self.iteration += 1;
        }
        self.teacher = self.student.clone();
        Ok(())
    }

    /// Pseudo-labels for one unlabeled scene from the teacher's weak view.
    fn pseudo_labels(
        &mut self,
        scene: &SyntheticScene,
        proposals: &[Proposal],
        fusion: FusionState,
        stats: &mut PseudoStats,
    ) -> Result<Vec<PseudoLabel>> {
        let cfg = self.config;
        let view = noisy_view(scene, &cfg.weak, &mut self.unlabeled_rng);
        let fwd = self.teacher.forward(scene, &view, proposals)?;
        let filtered = filter_predictions(&fwd.predictions, &cfg.filter);
        stats.candidates += fwd.predictions.len();
        stats.kept += filtered.kept.len();
        let mut pseudo = Vec::with_capacity(filtered.kept.len());
        for k in filtered.kept_indices() {
            let pred = &fwd.predictions[k];
            let teacher_dist = Distribution::new(softmax(&pred.class_logits))?;
            let class_id = if cfg.correction_enabled {
                let ext = self.external.classify(&ExternalQuery {
                    instance_id: format!("{}:{}", scene.id, k),
                    source_class: proposals[k].source.map(|g| scene.instances[g].class_id),
                    vocabulary: &self.vocabulary,
                })?;
                correct_with_weight(&teacher_dist, &ext, fusion.weight())?.class_id
            } else {
                teacher_dist.argmax()
            };
            if class_id != teacher_dist.argmax() {
                stats.corrected += 1;
            }
            let (h, w) = pred.mask_logits.shape();
            let uncertainty = if cfg.uncertainty_enabled {
                uncertainty_map(&pred.mask_logits)
            } else {
                UncertaintyMap::uniform(h, w, 0.0)?
            };
            pseudo.push(PseudoLabel::new(class_id, binarize(&pred.mask_logits, 0.5), uncertainty)?);
        }
        let (tp, covered) = pseudo_label_hits(&pseudo, &scene.instances)?;
        stats.true_positive += tp;
        stats.covered += covered;
        stats.ground_truth += scene.instances.len();
        Ok(pseudo)
    }

    /// One teacher-student iteration.
    pub fn mutual_step(&mut self) -> Result<()> {
        let cfg = self.config;
        if self.iteration < cfg.schedule.burn_in_iters {
            return Err(Error::invalid("mutual learning requires a completed burn-in"));
        }
        let fusion = FusionState::new(self.iteration, cfg.schedule.max_iters)?;
        let student = self.student.clone();
        let labeled = self.labeled_batch(&student)?;

        let nu = cfg.schedule.unlabeled_batch;
        let mut unsup = LossTerms::default();
        let mut unsup_grad = vec![0.0; student.num_params()];
        let mut stats = PseudoStats::default();
        for _ in 0..nu {
            let scene = &self.data.unlabeled[self.unlabeled_rng.random_range(0..self.data.unlabeled.len())];
            let proposals = make_proposals(scene, &cfg.proposals, true, &mut self.unlabeled_rng);
            let pseudo = self.pseudo_labels(scene, &proposals, fusion, &mut stats)?;
            let kept_views = drop_proposals(&proposals, &cfg.strong, &mut self.unlabeled_rng);
            let student_props: Vec<Proposal> = kept_views.iter().map(|&i| proposals[i]).collect();
            let view = noisy_view(scene, &cfg.strong, &mut self.unlabeled_rng);
            let fwd = student.forward(scene, &view, &student_props)?;
            let matching = match_predictions(&fwd.predictions, &pseudo, &cfg.loss.cost_weights)?;
            let (t, g) = unsupervised_terms(&fwd.predictions, &pseudo, &matching, &cfg.loss)?;
            unsup.class += t.class / nu as f64;
            unsup.mask += t.mask / nu as f64;
            unsup.dice += t.dice / nu as f64;
            student.backward(&fwd, &g, 1.0 / nu as f64, &mut unsup_grad);
        }

        let lambda = cfg.loss.lambda;
        let grad: Vec<f64> = labeled.grad.iter().zip(&unsup_grad).map(|(s, u)| s + lambda * u).collect();
        let total = crate::loss::total_loss(labeled.terms.total(), unsup.total(), lambda);
        self.check_finite(&unsup, &grad)?;
        self.sgd(&grad)?;

        let mut teacher = self.teacher.params();
        ema_update(&mut teacher, &self.student.params(), cfg.ema.alpha)?;
        self.teacher.set_params(&teacher)?;

        self.log.push(IterationLog {
            iteration: self.iteration,
            phase: Phase::Mutual,
            fusion_weight: Some(fusion.weight()),
            supervised: labeled.terms,
            unsupervised: unsup,
            total_loss: total,
            candidates: stats.candidates,
            kept: stats.kept,
            rejected: stats.candidates - stats.kept,
            corrected: stats.corrected,
            true_positive: stats.true_positive,
            ground_truth: stats.ground_truth,
            covered: stats.covered,
            pseudo_precision: ratio(stats.true_positive, stats.kept),
            pseudo_recall: ratio(stats.covered, stats.ground_truth),
        });
        self.iteration += 1;
        Ok(())
    }

    /// Runs the remaining mutual-learning iterations up to `max_iters`.
    pub fn run_mutual_learning(&mut self) -> Result<()> {
        while self.iteration < self.config.schedule.max_iters {
            self.mutual_step()?;
        }
        Ok(())
    }
}

/// Counts kept pseudo-labels that hit a ground-truth instance (IoU > 0.5,
/// same class) and ground-truth instances hit by at least one of them.
pub fn pseudo_label_hits(pseudo: &[PseudoLabel], ground_truth: &[GroundTruthInstance]) -> Result<(usize, usize)> {
    let mut covered = vec![false; ground_truth.len()];
    let mut tp = 0;
    for p in pseudo {
        let mut hit = false;
        for (g, gt) in ground_truth.iter().enumerate() {
            if gt.class_id == p.class_id && mask_iou(&p.mask, &gt.mask)? > 0.5 {
                hit = true;
                covered[g] = true;
            }
        }
        tp += usize::from(hit);
    }
    Ok((tp, covered.iter().filter(|&&c| c).count()))
}

/// Semantic segmentation metrics; class `N` is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean IoU over classes present in prediction or ground truth, in points.
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// `None` where a class never occurs.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Per-pixel semantic labels: the class of the most confident instance whose
/// foreground probability exceeds 0.5, or `num_classes` for background.
pub fn semantic_map(predictions: &[crate::instance::InstancePrediction], height: usize, width: usize, num_classes: usize) -> Vec<usize> {
    let mut best = vec![(0.5, num_classes); height * width];
    for p in predictions {
        let class = p.class_logits.argmax();
        for (slot, &z) in best.iter_mut().zip(p.mask_logits.values()) {
            let prob = sigmoid(z);
            if prob > slot.0 {
                *slot = (prob, class);
            }
        }
    }
    best.into_iter().map(|(_, c)| c).collect()
}

pub fn ground_truth_map(scene: &SyntheticScene) -> Vec<usize> {
    let mut out = vec![scene.num_classes(); scene.height * scene.width];
    for gt in &scene.instances {
        for (slot, &b) in out.iter_mut().zip(gt.mask.bits()) {
            if b {
                *slot = gt.class_id;
            }
        }
    }
    out
}

/// Evaluates `model` on clean test scenes, with proposals jittered around the
/// ground-truth boxes by a fixed seed so every model sees the same boxes.
pub fn evaluate(model: &ToyModel, scenes: &[SyntheticScene], proposals: &ProposalConfig) -> Result<EvalMetrics> {
    let n = model.num_classes;
    let mut inter = vec![0usize; n + 1];
    let mut union = vec![0usize; n + 1];
    let (mut correct, mut total) = (0usize, 0usize);
    let clean = NoiseChannel::clean(ChannelKind::Weak);
    for scene in scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0xE7A1);
        let props = make_proposals(scene, proposals, false, &mut rng);
        let view = noisy_view(scene, &clean, &mut rng);
        let fwd = model.forward(scene, &view, &props)?;
        let pred = semantic_map(&fwd.predictions, scene.height, scene.width, n);
        let truth = ground_truth_map(scene);
        for (&p, &t) in pred.iter().zip(&truth) {
            total += 1;
            if p == t {
                correct += 1;
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[t] += 1;
            }
        }
    }
    let per_class_iou: Vec<Option<f64>> = inter.iter().zip(&union).map(|(&i, &u)| ratio(i, u)).collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = 100.0 * present.iter().sum::<f64>() / present.len().max(1) as f64;
    Ok(EvalMetrics {
        miou,
        pixel_accuracy: correct as f64 / total.max(1) as f64,
        per_class_iou,
    })
}

/// Final metrics and log of a complete run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub burn_in: EvalMetrics,
    pub teacher: EvalMetrics,
    pub student: EvalMetrics,
    /// Pooled over all mutual-learning iterations.
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
    #[serde(skip)]
    pub log: Vec<IterationLog>,
    #[serde(skip)]
    pub teacher_model: Option<ToyModel>,
}

/// Generates the benchmark for `config.schedule.seed`, then runs burn-in,
/// mutual learning and evaluation.
pub fn run_training(config: &TrainerConfig) -> Result<RunOutcome> {
    let data = Benchmark::generate(config.schedule.seed, config)?;
    run_on(config, &data)
}

pub fn run_on(config: &TrainerConfig, data: &Benchmark) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.run_burn_in()?;
    let burn_in = evaluate(&trainer.teacher, &data.test, &config.proposals)?;
    trainer.run_mutual_learning()?;
    let teacher = evaluate(&trainer.teacher, &data.test, &config.proposals)?;
    let student = evaluate(&trainer.student, &data.test, &config.proposals)?;
    let mutual = trainer.log.iter().filter(|l| l.phase == Phase::Mutual);
    let (tp, kept, covered, gt) = mutual.fold((0, 0, 0, 0), |a, l| {
        (a.0 + l.true_positive, a.1 + l.kept, a.2 + l.covered, a.3 + l.ground_truth)
    });
    Ok(RunOutcome {
        seed: config.schedule.seed,
        burn_in,
        teacher,
        student,
        pseudo_precision: ratio(tp, kept),
        pseudo_recall: ratio(covered, gt),
        log: trainer.log,
        teacher_model: Some(trainer.teacher),
    })
}

/// Mean results of one variant over several seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: usize,
    pub mean_miou: f64,
    pub mean_pixel_accuracy: f64,
    /// Mean over seeds that kept at least one pseudo-label.
    pub mean_pseudo_precision: Option<f64>,
    pub runs: Vec<RunOutcome>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs every variant on seeds `0..seeds`, sharing the scenes of each seed
/// across variants.
pub fn run_ablation(base: &TrainerConfig, variants: &[Variant], seeds: u64) -> Result<Vec<VariantSummary>> {
    let mut runs: Vec<Vec<RunOutcome>> = vec![Vec::new(); variants.len()];
    for seed in 0..seeds {
        let mut seeded = base.clone();
        seeded.schedule.seed = seed;
        let data = Benchmark::generate(seed, &seeded)?;
        for (slot, v) in runs.iter_mut().zip(variants) {
            slot.push(run_on(&v.apply(&seeded), &data)?);
        }
    }
    Ok(variants
        .iter()
        .zip(runs)
        .map(|(&variant, runs)| VariantSummary {
            variant,
            seeds: runs.len(),
            mean_miou: mean(runs.iter().map(|r| r.teacher.miou)).unwrap_or(f64::NAN),
            mean_pixel_accuracy: mean(runs.iter().map(|r| r.teacher.pixel_accuracy)).unwrap_or(f64::NAN),
            mean_pseudo_precision: mean(runs.iter().filter_map(|r| r.pseudo_precision)),
            runs,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainerConfig {
        let mut c = TrainerConfig::default();
        c.schedule.burn_in_iters = 20;
        c.schedule.max_iters = 40;
        c.num_unlabeled = 6;
        c.num_test = 4;
        c
    }

    #[test]
    fn ema_examples() {
        let mut t = vec![0.0, 2.0];
        ema_update(&mut t, &[1.0, 4.0], 1.0).unwrap();
        assert_eq!(t, vec![0.0, 2.0]);
        ema_update(&mut t, &[1.0, 4.0], 0.0).unwrap();
        assert_eq!(t, vec![1.0, 4.0]);
        let mut t = vec![0.0];
        ema_update(&mut t, &[1.0], 0.5).unwrap();
        assert_eq!(t, vec![0.5]);
        assert!(ema_update(&mut t, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule::default();
        s.burn_in_iters = 0;
        assert!(s.validate().is_err());
        s.burn_in_iters = s.max_iters;
        assert!(s.validate().is_err());
    }

    #[test]
    fn burn_in_loss_decreases() {
        let cfg = small();
        let data = Benchmark::generate(0, &cfg).unwrap();
        let mut t = Trainer::new(&cfg, &data).unwrap();
        let scene = &data.labeled[0];
        let props = make_proposals(scene, &cfg.proposals, false, &mut ChaCha8Rng::seed_from_u64(0));
        let targets: Vec<PseudoLabel> = scene.instances.iter().map(PseudoLabel::certain).collect();
        let loss = |m: &ToyModel| {
            let f = m.forward(scene, &scene.features, &props).unwrap();
            let mt = match_predictions(&f.predictions, &targets, &cfg.loss.cost_weights).unwrap();
            supervised_terms(&f.predictions, &targets, &mt, &cfg.loss).unwrap().0.total()
        };
        let before = loss(&t.teacher);
        t.run_burn_in().unwrap();
        assert!(loss(&t.teacher) < before);
        assert_eq!(t.teacher, t.student);
    }

    #[test]
    fn mutual_before_burn_in_fails() {
        let cfg = small();
        let data = Benchmark::generate(0, &cfg).unwrap();
        let mut t = Trainer::new(&cfg, &data).unwrap();
        assert!(t.mutual_step().is_err());
    }

    #[test]
    fn variants_toggle_modules() {
        let base = TrainerConfig::default();
        assert_eq!(Variant::NoDdtf.apply(&base).filter.mode, FilterMode::Coupled);
        assert!(!Variant::NoDicc.apply(&base).correction_enabled);
        assert!(!Variant::NoPmua.apply(&base).uncertainty_enabled);
        let b = Variant::Baseline.apply(&base);
        assert!(!b.correction_enabled && !b.uncertainty_enabled && b.filter.mode == FilterMode::Coupled);
        assert_eq!("no_pmua".parse::<Variant>().unwrap(), Variant::NoPmua);
    }

    #[test]
    fn semantic_map_picks_most_confident() {
        use crate::instance::{ClassLogits, InstancePrediction, MaskLogitGrid};
        let a = InstancePrediction::new(ClassLogits::new(vec![1.0, 0.0]).unwrap(), MaskLogitGrid::new(1, 3, vec![2.0, 1.0, -1.0]).unwrap());
        let b = InstancePrediction::new(ClassLogits::new(vec![0.0, 1.0]).unwrap(), MaskLogitGrid::new(1, 3, vec![1.0, 3.0, -2.0]).unwrap());
        assert_eq!(semantic_map(&[a, b], 1, 3, 2), vec![0, 1, 2]);
    }
}
