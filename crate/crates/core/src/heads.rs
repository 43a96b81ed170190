//! Linear softmax classification heads and the three training regimes:
//! standard image sampling, class-balanced sampling, and repeat-factor
//! image sampling.
//!
//! Standard and repeat-factor training share one weighted-draw code path, so
//! a repeat threshold at or below every class frequency reproduces standard
//! training exactly, random draw for random draw.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::scores::ScoreMatrix;
use crate::twostage::{match_proposals, DEFAULT_MATCH_IOU};
use crate::world::World;
use crate::{Error, Result};

/// Linear classifier over proposal features: `C` foreground classes plus a
/// trailing background class, one weight row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub class_order: Vec<u32>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl Head {
    /// Fresh head with `N(0, 0.01)` weights and zero biases.
    pub fn init(class_order: Vec<u32>, feature_dim: usize, rng: &mut ChaCha8Rng) -> Head {
        let dist = Normal::new(0.0, 0.01).expect("const sigma");
        let rows = class_order.len() + 1;
        Head {
            class_order,
            weights: (0..rows)
                .map(|_| (0..feature_dim).map(|_| dist.sample(rng)).collect())
                .collect(),
            biases: vec![0.0; rows],
        }
    }

    pub fn init_for_world(world: &World, rng: &mut ChaCha8Rng) -> Head {
        let order: Vec<u32> = (0..world.num_categories() as u32).collect();
        Head::init(order, world.config.feature_dim, rng)
    }

    pub fn num_foreground(&self) -> usize {
        self.class_order.len()
    }

    /// Label index of the background class.
    pub fn background_label(&self) -> usize {
        self.class_order.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.class_order.len() + 1;
        if self.weights.len() != rows || self.biases.len() != rows {
            return Err(Error::shape(format!(
                "head must have {rows} weight rows and biases for {} classes plus background",
                self.class_order.len()
            )));
        }
        let dim = self.feature_dim();
        if dim == 0 || self.weights.iter().any(|w| w.len() != dim) {
            return Err(Error::shape("head weight rows must share a positive feature dim"));
        }
        Ok(())
    }

    pub fn compatible_with(&self, world: &World) -> Result<()> {
        self.validate()?;
        let expected: Vec<u32> = (0..world.num_categories() as u32).collect();
        if self.class_order != expected {
            return Err(Error::config(
                "head class order does not match the world's category table",
            ));
        }
        if self.feature_dim() != world.config.feature_dim {
            return Err(Error::shape(format!(
                "head feature dim {} does not match world feature dim {}",
                self.feature_dim(),
                world.config.feature_dim
            )));
        }
        Ok(())
    }

    /// Scores the frozen proposals of a set of images, row-aligned with the
    /// concatenation of `World::frozen_proposals` over `images` in order.
    pub fn score_images(
        &self,
        world: &World,
        images: &[crate::world::SceneImage],
    ) -> Result<(Vec<crate::world::Proposal>, ScoreMatrix)> {
        self.compatible_with(world)?;
        let mut proposals = Vec::new();
        for image in images {
            proposals.extend(world.frozen_proposals(image));
        }
        let rows: Vec<&[f64]> = proposals.iter().map(|p| p.feature.as_slice()).collect();
        let scores = forward(self, &rows)?;
        Ok((proposals, scores))
    }
}

/// Softmax scores for a batch of feature rows. Each output row sums to 1
/// within 1e-12.
pub fn forward<F: AsRef<[f64]>>(head: &Head, features: &[F]) -> Result<ScoreMatrix> {
    head.validate()?;
    let dim = head.feature_dim();
    let cols = head.class_order.len() + 1;
    let mut out = ScoreMatrix::zeros(features.len(), head.class_order.clone());
    let mut logits = vec![0.0; cols];
    for (r, feat) in features.iter().enumerate() {
        let x = feat.as_ref();
        if x.len() != dim {
            return Err(Error::shape(format!(
                "feature row {r} has dim {}, head expects {dim}",
                x.len()
            )));
        }
        logits_into(head, x, &mut logits);
        softmax_in_place(&mut logits);
        out.row_mut(r).copy_from_slice(&logits);
    }
    Ok(out)
}

fn logits_into(head: &Head, x: &[f64], logits: &mut [f64]) {
    for (c, row) in head.weights.iter().enumerate() {
        let mut acc = head.biases[c];
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        logits[c] = acc;
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Mean cross-entropy of a labeled batch and its gradient with respect to
/// head weights and biases. Labels are class indices with background last.
pub fn ce_loss_and_grad<F: AsRef<[f64]>>(
    head: &Head,
    features: &[F],
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    head.validate()?;
    if features.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let dim = head.feature_dim();
    let cols = head.class_order.len() + 1;
    let inv_n = 1.0 / features.len() as f64;

    let mut grad = Gradients {
        weights: vec![vec![0.0; dim]; cols],
        biases: vec![0.0; cols],
    };
    let mut logits = vec![0.0; cols];
    let mut loss = 0.0;
    for (feat, &label) in features.iter().zip(labels) {
        let x = feat.as_ref();
        if x.len() != dim {
            return Err(Error::shape(format!("feature dim {} vs head dim {dim}", x.len())));
        }
        if label >= cols {
            return Err(Error::config(format!(
                "label {label} out of range for {cols} classes"
            )));
        }
        logits_into(head, x, &mut logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += (lse - logits[label]) * inv_n;
        for (c, &logit) in logits.iter().enumerate() {
            let mut d = (logit - lse).exp() * inv_n;
            if c == label {
                d -= inv_n;
            }
            for (g, v) in grad.weights[c].iter_mut().zip(x) {
                *g += d * v;
            }
            grad.biases[c] += d;
        }
    }
    Ok((loss, grad))
}

/// Momentum buffer for SGD, same shape as the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl Velocity {
    pub fn zeros_like(head: &Head) -> Velocity {
        Velocity {
            weights: head.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: vec![0.0; head.biases.len()],
        }
    }
}

/// One SGD step with classic momentum:
/// `v <- momentum * v + g`, `w <- w - lr * v`.
pub fn sgd_step(
    head: &mut Head,
    grad: &Gradients,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    if grad.weights.len() != head.weights.len() || grad.biases.len() != head.biases.len() {
        return Err(Error::shape("gradient shape does not match head"));
    }
    if !lr.is_finite() || lr < 0.0 || !(0.0..1.0).contains(&momentum) {
        return Err(Error::config("lr must be finite >= 0 and momentum in [0, 1)"));
    }
    let finite = grad.biases.iter().all(|g| g.is_finite())
        && grad.weights.iter().flatten().all(|g| g.is_finite());
    if !finite {
        return Err(Error::NonFinite("gradient".into()));
    }
    for ((w_row, g_row), v_row) in head
        .weights
        .iter_mut()
        .zip(&grad.weights)
        .zip(&mut velocity.weights)
    {
        if w_row.len() != g_row.len() {
            return Err(Error::shape("gradient row width does not match head"));
        }
        for ((w, &g), v) in w_row.iter_mut().zip(g_row).zip(v_row.iter_mut()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    for ((b, &g), v) in head
        .biases
        .iter_mut()
        .zip(&grad.biases)
        .zip(&mut velocity.biases)
    {
        *v = momentum * *v + g;
        *b -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub minibatch_images: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_epochs: 12,
            base_lr: 0.01,
            lr_drop_epochs: vec![8, 11],
            lr_decay: 0.1,
            momentum: 0.9,
            minibatch_images: 8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.minibatch_images == 0 {
            return Err(Error::config("total_epochs and minibatch_images must be positive"));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::config("base_lr must be finite and positive"));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        let sorted = self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]);
        if !sorted || self.lr_drop_epochs.iter().any(|&e| e >= self.total_epochs) {
            return Err(Error::config(
                "lr_drop_epochs must be strictly increasing and below total_epochs",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.lr_decay.powi(drops as i32)
    }
}

/// Steps per epoch for image-level sampling: one pass over the training
/// images in expectation.
pub fn steps_per_epoch(world: &World, schedule: &TrainSchedule) -> usize {
    world.train_images.len().div_ceil(schedule.minibatch_images)
}

/// Frozen training data: labeled proposals of every training image, grouped
/// so minibatches can be assembled per image.
pub struct TrainSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Prefix offsets, one per image plus a trailing end: rows of image `i`
    /// are `image_starts[i]..image_starts[i + 1]`.
    pub image_starts: Vec<usize>,
}

impl TrainSet {
    pub fn build(world: &World) -> TrainSet {
        let background = world.num_categories();
        let mut set = TrainSet {
            features: Vec::new(),
            labels: Vec::new(),
            image_starts: Vec::with_capacity(world.train_images.len() + 1),
        };
        for image in &world.train_images {
            set.image_starts.push(set.features.len());
            let proposals = world.frozen_proposals(image);
            let matches = match_proposals(&proposals, &image.objects, DEFAULT_MATCH_IOU);
            for (p, m) in proposals.into_iter().zip(matches) {
                set.labels.push(match m.gt_index {
                    Some(j) => image.objects[j].category_id as usize,
                    None => background,
                });
                set.features.push(p.feature);
            }
        }
        set.image_starts.push(set.features.len());
        set
    }

    pub fn image_rows(&self, image: usize) -> std::ops::Range<usize> {
        self.image_starts[image]..self.image_starts[image + 1]
    }
}

fn draw_index(cum: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>() * total;
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

fn train_weighted(
    world: &World,
    image_weights: &[f64],
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Head> {
    schedule.validate()?;
    if image_weights.len() != world.train_images.len() {
        return Err(Error::shape(format!(
            "{} image weights for {} training images",
            image_weights.len(),
            world.train_images.len()
        )));
    }
    if image_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("image weights must be finite and non-negative"));
    }
    let mut cum = Vec::with_capacity(image_weights.len());
    let mut total = 0.0;
    for &w in image_weights {
        total += w;
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(Error::config("image weights sum to zero"));
    }

    let set = TrainSet::build(world);
    let mut head = Head::init_for_world(world, rng);
    let mut velocity = Velocity::zeros_like(&head);
    let per_epoch = steps_per_epoch(world, schedule);

    let mut feats: Vec<&[f64]> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch);
        for _ in 0..per_epoch {
            feats.clear();
            labels.clear();
            for _ in 0..schedule.minibatch_images {
                let image = draw_index(&cum, total, rng);
                for row in set.image_rows(image) {
                    feats.push(set.features[row].as_slice());
                    labels.push(set.labels[row]);
                }
            }
            if feats.is_empty() {
                continue;
            }
            let (_, grad) = ce_loss_and_grad(&head, &feats, &labels)?;
            sgd_step(&mut head, &grad, lr, schedule.momentum, &mut velocity)?;
        }
    }
    Ok(head)
}

/// Trains a head by uniform image sampling over the training split.
pub fn train_standard(world: &World, schedule: &TrainSchedule, rng: &mut ChaCha8Rng) -> Result<Head> {
    train_weighted(world, &vec![1.0; world.train_images.len()], schedule, rng)
}

/// Per-category repeat factor `max(1, sqrt(threshold / frequency))`.
/// Categories at or above the threshold frequency keep factor 1; a category
/// with zero frequency is never drawn and also keeps factor 1.
pub fn repeat_factors(frequencies: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::config("repeat threshold must be finite and non-negative"));
    }
    Ok(frequencies
        .iter()
        .map(|&f| {
            if f <= 0.0 {
                1.0
            } else {
                (threshold / f).sqrt().max(1.0)
            }
        })
        .collect())
}

/// Per-image repeat factor: the max factor over categories present in the
/// image (1 for an image with no objects).
pub fn image_repeat_factors(world: &World, threshold: f64) -> Result<Vec<f64>> {
    let per_category = repeat_factors(&world.train_frequencies(), threshold)?;
    Ok(world
        .train_images
        .iter()
        .map(|image| {
            image
                .objects
                .iter()
                .map(|o| per_category[o.category_id as usize])
                .fold(1.0, f64::max)
        })
        .collect())
}

/// Trains a head with repeat-factor image sampling: images are drawn with
/// probability proportional to their repeat factor. A threshold at or below
/// every class frequency makes all factors exactly 1 and reproduces
/// [`train_standard`] draw for draw.
pub fn train_repeat_sampled(
    world: &World,
    repeat_threshold: f64,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Head> {
    let weights = image_repeat_factors(world, repeat_threshold)?;
    train_weighted(world, &weights, schedule, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancedSamplerConfig {
    pub classes_per_step: usize,
    pub images_per_class: usize,
    pub include_background: bool,
    /// Background rows kept per foreground row in a balanced batch.
    pub background_ratio: f64,
    pub iou_threshold: f64,
}

impl Default for BalancedSamplerConfig {
    fn default() -> Self {
        BalancedSamplerConfig {
            classes_per_step: 16,
            images_per_class: 1,
            include_background: true,
            background_ratio: 1.0,
            iou_threshold: 0.5,
        }
    }
}

impl BalancedSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_step == 0 || self.images_per_class == 0 {
            return Err(Error::config(
                "classes_per_step and images_per_class must be positive",
            ));
        }
        if !self.background_ratio.is_finite() || self.background_ratio < 0.0 {
            return Err(Error::config("background_ratio must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::config("iou_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Class-balanced batch sampler: each step draws distinct classes uniformly,
/// one or more images per class, and keeps the proposals matched to the
/// sampled classes plus the exact prototype feature of each sampled-class
/// ground-truth box. Background proposals from the visited images are kept
/// up to `background_ratio` times the foreground row count.
#[derive(Debug)]
pub struct BalancedSampler<'w> {
    world: &'w World,
    cfg: BalancedSamplerConfig,
    images_by_category: Vec<Vec<usize>>,
}

impl<'w> BalancedSampler<'w> {
    pub fn new(world: &'w World, cfg: BalancedSamplerConfig) -> Result<BalancedSampler<'w>> {
        cfg.validate()?;
        let mut images_by_category = vec![Vec::new(); world.num_categories()];
        for (cat, images) in world.train_images_by_category() {
            images_by_category[cat as usize] = images;
        }
        for (cat, images) in images_by_category.iter().enumerate() {
            if images.is_empty() {
                return Err(Error::config(format!(
                    "category {cat} appears in no training image"
                )));
            }
        }
        Ok(BalancedSampler {
            world,
            cfg,
            images_by_category,
        })
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let num_cats = self.world.num_categories();
        let background = num_cats;
        let draw = self.cfg.classes_per_step.min(num_cats);
        let classes = rand::seq::index::sample(rng, num_cats, draw);
        let mut sampled = vec![false; num_cats];
        for c in classes.iter() {
            sampled[c] = true;
        }

        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let mut background_pool: Vec<Vec<f64>> = Vec::new();
        for cat in classes.iter() {
            for _ in 0..self.cfg.images_per_class {
                let candidates = &self.images_by_category[cat];
                let image_idx = candidates[rng.random_range(0..candidates.len())];
                let image = &self.world.train_images[image_idx];
                let proposals = self.world.frozen_proposals(image);
                let matches = match_proposals(&proposals, &image.objects, self.cfg.iou_threshold);
                for (p, m) in proposals.into_iter().zip(matches) {
                    match m.gt_index {
                        Some(j) => {
                            let c = image.objects[j].category_id as usize;
                            if sampled[c] {
                                features.push(p.feature);
                                labels.push(c);
                            }
                        }
                        None => {
                            if self.cfg.include_background {
                                background_pool.push(p.feature);
                            }
                        }
                    }
                }
                for obj in &image.objects {
                    let c = obj.category_id as usize;
                    if sampled[c] {
                        features.push(self.world.prototypes[c].clone());
                        labels.push(c);
                    }
                }
            }
        }
        if self.cfg.include_background {
            background_pool.shuffle(rng);
            let want = (self.cfg.background_ratio * labels.len() as f64).round() as usize;
            for feature in background_pool.into_iter().take(want) {
                features.push(feature);
                labels.push(background);
            }
        }
        (features, labels)
    }
}

/// One balanced batch; convenience wrapper over [`BalancedSampler`].
pub fn sample_balanced_batch(
    world: &World,
    cfg: &BalancedSamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    Ok(BalancedSampler::new(world, cfg.clone())?.sample_batch(rng))
}

/// Retrains a classification head with class-balanced sampling. Starts from
/// `base` when given, otherwise from a fresh random head. The step budget
/// matches image-level training under the same schedule.
pub fn train_balanced(
    world: &World,
    base: Option<&Head>,
    cfg: &BalancedSamplerConfig,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Head> {
    schedule.validate()?;
    let sampler = BalancedSampler::new(world, cfg.clone())?;
    let mut head = match base {
        Some(h) => {
            h.compatible_with(world)?;
            h.clone()
        }
        None => Head::init_for_world(world, rng),
    };
    let mut velocity = Velocity::zeros_like(&head);
    let per_epoch = steps_per_epoch(world, schedule);
    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch);
        for _ in 0..per_epoch {
            let (features, labels) = sampler.sample_batch(rng);
            if features.is_empty() {
                continue;
            }
            let (_, grad) = ce_loss_and_grad(&head, &features, &labels)?;
            sgd_step(&mut head, &grad, lr, schedule.momentum, &mut velocity)?;
        }
    }
    Ok(head)
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadCheckpoint {
    class_order: Vec<u32>,
    feature_dim: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
    world_fingerprint: String,
}

/// Saves a head as JSON together with the fingerprint of the world config it
/// was trained against.
pub fn save_head(head: &Head, world_fingerprint: &str, path: &Path) -> Result<()> {
    head.validate()?;
    let ckpt = HeadCheckpoint {
        class_order: head.class_order.clone(),
        feature_dim: head.feature_dim(),
        weights: head.weights.clone(),
        biases: head.biases.clone(),
        world_fingerprint: world_fingerprint.to_string(),
    };
    crate::write_file(path, serde_json::to_string_pretty(&ckpt)?)
}

/// Loads a head checkpoint, returning the head and the world fingerprint it
/// was saved with. Callers decide whether the fingerprint must match.
pub fn load_head(path: &Path) -> Result<(Head, String)> {
    let text = crate::read_to_string(path)?;
    let ckpt: HeadCheckpoint = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let head = Head {
        class_order: ckpt.class_order,
        weights: ckpt.weights,
        biases: ckpt.biases,
    };
    head.validate().map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if head.feature_dim() != ckpt.feature_dim {
        return Err(Error::FileFormat {
            path: path.to_path_buf(),
            msg: format!(
                "declared feature_dim {} does not match weight rows of dim {}",
                ckpt.feature_dim,
                head.feature_dim()
            ),
        });
    }
    Ok((head, ckpt.world_fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn head_from(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Head {
        Head {
            class_order: (0..(weights.len() - 1) as u32).collect(),
            weights,
            biases,
        }
    }

    #[test]
    fn zero_head_scores_uniformly() {
        let head = head_from(vec![vec![0.0; 3]; 5], vec![0.0; 5]);
        let scores = forward(&head, &[vec![0.3, -1.0, 2.0]]).unwrap();
        for c in 0..5 {
            assert!((scores.get(0, c) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        let head = head_from(
            vec![
                vec![0.5, -0.25, 1.0, 0.0],
                vec![-1.5, 0.75, 0.3, 2.0],
                vec![0.1, 0.1, -0.9, 0.4],
            ],
            vec![0.2, -0.7, 0.05],
        );
        let features = vec![vec![1.2, -0.4, 0.9, 2.1], vec![0.0, 0.0, 0.0, 0.0]];
        let scores = forward(&head, &features).unwrap();
        for (r, x) in features.iter().enumerate() {
            // Direct term-by-term reference without the max shift.
            let logits: Vec<f64> = head
                .weights
                .iter()
                .zip(&head.biases)
                .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (c, l) in logits.iter().enumerate() {
                assert!((scores.get(r, c) - l.exp() / z).abs() < 1e-14);
            }
            let row_sum: f64 = scores.row(r).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_invariant_to_bias_shift() {
        let mut rng = rng(3);
        let head = Head::init((0..4).collect(), 6, &mut rng);
        let mut shifted = head.clone();
        for b in shifted.biases.iter_mut() {
            *b += 3.75;
        }
        let x: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let a = forward(&head, &x).unwrap();
        let b = forward(&shifted, &x).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert!((a.get(r, c) - b.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let head = head_from(vec![vec![0.0; 3]; 2], vec![0.0; 2]);
        assert!(forward(&head, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(17);
        let head = Head::init((0..3).collect(), 4, &mut r);
        let features: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| r.random_range(-1.5..1.5)).collect())
            .collect();
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
        let (_, grad) = ce_loss_and_grad(&head, &features, &labels).unwrap();

        let h = 1e-6;
        let loss_of = |head: &Head| ce_loss_and_grad(head, &features, &labels).unwrap().0;
        for c in 0..4 {
            for d in 0..4 {
                let mut hi = head.clone();
                hi.weights[c][d] += h;
                let mut lo = head.clone();
                lo.weights[c][d] -= h;
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                assert!(
                    (fd - grad.weights[c][d]).abs() < 1e-8,
                    "weight [{c}][{d}]: fd {fd} vs grad {}",
                    grad.weights[c][d]
                );
            }
            let mut hi = head.clone();
            hi.biases[c] += h;
            let mut lo = head.clone();
            lo.biases[c] -= h;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
            assert!((fd - grad.biases[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // Constant gradient g for two steps from zero velocity:
        // deltas lr*g then lr*1.9*g, total lr*g*2.9.
        let mut head = head_from(vec![vec![1.0], vec![0.0]], vec![0.0, 0.0]);
        let grad = Gradients {
            weights: vec![vec![0.04], vec![0.0]],
            biases: vec![0.0, 0.0],
        };
        let mut vel = Velocity::zeros_like(&head);
        sgd_step(&mut head, &grad, 0.5, 0.9, &mut vel).unwrap();
        assert!((head.weights[0][0] - (1.0 - 0.5 * 0.04)).abs() < 1e-15);
        sgd_step(&mut head, &grad, 0.5, 0.9, &mut vel).unwrap();
        assert!((head.weights[0][0] - (1.0 - 0.5 * 0.04 * 2.9)).abs() < 1e-15);
        assert!((vel.weights[0][0] - 1.9 * 0.04).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut head = head_from(vec![vec![1.0], vec![0.0]], vec![0.0, 0.0]);
        let grad = Gradients {
            weights: vec![vec![f64::NAN], vec![0.0]],
            biases: vec![0.0, 0.0],
        };
        let mut vel = Velocity::zeros_like(&head);
        let err = sgd_step(&mut head, &grad, 0.1, 0.9, &mut vel).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn schedule_drops_lr_at_boundaries() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(7), 0.01);
        assert!((s.lr_at(8) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(10) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(11) - 0.0001).abs() < 1e-15);
        assert!(TrainSchedule {
            lr_drop_epochs: vec![8, 12],
            ..s
        }
        .validate()
        .is_err());
    }

    // One category, no feature noise: every foreground row is exactly the
    // prototype, a point far outside the unit-normal background cloud in
    // 32 dimensions, so a linear head can fit the split almost perfectly.
    fn one_class_world() -> crate::world::World {
        generate_world(&WorldConfig {
            num_categories: 1,
            total_instances: 200,
            proposal_recall: 1.0,
            box_jitter: 0.0,
            feature_noise_sigma: 0.0,
            background_per_image: 2,
            val_fraction: 0.0,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn standard_training_fits_a_separable_world() {
        let world = one_class_world();
        let schedule = TrainSchedule {
            total_epochs: 60,
            base_lr: 0.02,
            lr_drop_epochs: vec![45, 55],
            ..TrainSchedule::default()
        };
        let head = train_standard(&world, &schedule, &mut rng(5)).unwrap();
        let set = TrainSet::build(&world);
        let rows: Vec<&[f64]> = set.features.iter().map(Vec::as_slice).collect();
        let scores = forward(&head, &rows).unwrap();
        let correct = (0..rows.len())
            .filter(|&r| {
                let row = scores.row(r);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                argmax == set.labels[r]
            })
            .count();
        let accuracy = correct as f64 / rows.len() as f64;
        assert!(accuracy > 0.99, "train accuracy {accuracy}");
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let world = one_class_world();
        let schedule = TrainSchedule {
            total_epochs: 2,
            lr_drop_epochs: vec![],
            ..TrainSchedule::default()
        };
        let a = train_standard(&world, &schedule, &mut rng(9)).unwrap();
        let b = train_standard(&world, &schedule, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        let c = train_standard(&world, &schedule, &mut rng(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn repeat_factor_values() {
        let f = repeat_factors(&[0.0001, 0.001, 0.5, 0.0], 0.001).unwrap();
        assert!((f[0] - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[2], 1.0);
        assert_eq!(f[3], 1.0);
        assert!(repeat_factors(&[0.1], f64::NAN).is_err());
    }

    #[test]
    fn image_factors_take_the_max_over_categories() {
        let world = generate_world(&WorldConfig {
            num_categories: 8,
            total_instances: 400,
            ..WorldConfig::default()
        })
        .unwrap();
        let freqs = world.train_frequencies();
        let threshold = 0.2;
        let per_cat = repeat_factors(&freqs, threshold).unwrap();
        let per_image = image_repeat_factors(&world, threshold).unwrap();
        for (image, &factor) in world.train_images.iter().zip(&per_image) {
            let expected = image
                .objects
                .iter()
                .map(|o| per_cat[o.category_id as usize])
                .fold(1.0, f64::max);
            assert_eq!(factor, expected);
        }
        assert!(per_image.iter().any(|&f| f > 1.0));
    }

    #[test]
    fn repeat_training_at_zero_threshold_equals_standard() {
        let world = one_class_world();
        let schedule = TrainSchedule {
            total_epochs: 2,
            lr_drop_epochs: vec![],
            ..TrainSchedule::default()
        };
        let standard = train_standard(&world, &schedule, &mut rng(21)).unwrap();
        let repeat = train_repeat_sampled(&world, 0.0, &schedule, &mut rng(21)).unwrap();
        assert_eq!(standard, repeat);
    }

    #[test]
    fn repeat_draws_follow_computed_weights() {
        let world = generate_world(&WorldConfig {
            num_categories: 4,
            zipf_skew: 1.0,
            total_instances: 1000,
            ..WorldConfig::default()
        })
        .unwrap();
        let threshold = 0.3;
        let weights = image_repeat_factors(&world, threshold).unwrap();
        let total: f64 = weights.iter().sum();
        let boosted: f64 = weights.iter().filter(|&&w| w > 1.0).sum();
        let expected = boosted / total;

        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cum.push(acc);
        }
        let mut r = rng(33);
        let draws = 40_000;
        let mut hit = 0usize;
        for _ in 0..draws {
            let image = draw_index(&cum, total, &mut r);
            if weights[image] > 1.0 {
                hit += 1;
            }
        }
        let rate = hit as f64 / draws as f64;
        assert!(
            (rate - expected).abs() < 0.02,
            "boosted-image draw rate {rate} vs expected {expected}"
        );
    }

    fn balanced_world(categories: usize) -> crate::world::World {
        generate_world(&WorldConfig {
            num_categories: categories,
            total_instances: (categories as u64) * 100,
            zipf_skew: 1.0,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn balanced_batches_visit_classes_uniformly() {
        let world = balanced_world(25);
        let cfg = BalancedSamplerConfig::default();
        let sampler = BalancedSampler::new(&world, cfg).unwrap();
        let mut r = rng(8);
        let batches = 4000;
        let mut appearances = vec![0u32; world.num_categories()];
        for _ in 0..batches {
            let (_, labels) = sampler.sample_batch(&mut r);
            let mut seen = vec![false; world.num_categories() + 1];
            for &l in &labels {
                seen[l] = true;
            }
            for (c, &s) in seen[..world.num_categories()].iter().enumerate() {
                if s {
                    appearances[c] += 1;
                }
            }
        }
        // Every batch carries exactly 16 distinct foreground classes, so the
        // total is exact and the per-class spread is pure sampling noise
        // (std ~0.008 at 4000 batches; 0.03 is about four sigma).
        let total: u32 = appearances.iter().sum();
        assert_eq!(total, 16 * batches);
        let expected = 16.0 / 25.0;
        for (c, &n) in appearances.iter().enumerate() {
            let freq = n as f64 / batches as f64;
            assert!(
                (freq - expected).abs() < 0.03,
                "class {c} appeared with frequency {freq}, expected {expected}"
            );
        }
    }

    #[test]
    fn balanced_batch_composition() {
        let world = balanced_world(10);
        let cfg = BalancedSamplerConfig {
            classes_per_step: 2,
            background_ratio: 0.5,
            ..BalancedSamplerConfig::default()
        };
        let sampler = BalancedSampler::new(&world, cfg).unwrap();
        let mut r = rng(4);
        for _ in 0..50 {
            let (features, labels) = sampler.sample_batch(&mut r);
            assert_eq!(features.len(), labels.len());
            let background = world.num_categories();
            let fg: Vec<usize> = labels.iter().copied().filter(|&l| l != background).collect();
            let distinct: std::collections::BTreeSet<usize> = fg.iter().copied().collect();
            assert!(!fg.is_empty());
            assert!(distinct.len() <= 2, "foreground classes {distinct:?}");
            let bg = labels.len() - fg.len();
            assert!(bg <= (0.5 * fg.len() as f64).round() as usize);
            // Ground-truth rows carry the exact class prototype.
            for (f, &l) in features.iter().zip(&labels) {
                if l != background && f == &world.prototypes[l] {
                    return; // found at least one prototype row over the run
                }
            }
        }
        panic!("no prototype feature row seen in 50 balanced batches");
    }

    #[test]
    fn balanced_batch_without_background() {
        let world = balanced_world(6);
        let cfg = BalancedSamplerConfig {
            include_background: false,
            ..BalancedSamplerConfig::default()
        };
        let (_, labels) = sample_balanced_batch(&world, &cfg, &mut rng(2)).unwrap();
        assert!(labels.iter().all(|&l| l < world.num_categories()));
    }

    #[test]
    fn balanced_sampler_needs_every_class_in_some_image() {
        let mut world = balanced_world(6);
        // Orphan category 5 by relabeling its objects.
        for image in world.train_images.iter_mut() {
            for obj in image.objects.iter_mut() {
                if obj.category_id == 5 {
                    obj.category_id = 0;
                }
            }
        }
        let err = BalancedSampler::new(&world, BalancedSamplerConfig::default()).unwrap_err();
        assert!(err.to_string().contains("category 5"), "{err}");
    }

    #[test]
    fn balanced_training_learns_the_separable_world() {
        let world = one_class_world();
        let schedule = TrainSchedule {
            total_epochs: 2,
            lr_drop_epochs: vec![],
            ..TrainSchedule::default()
        };
        let head = train_balanced(
            &world,
            None,
            &BalancedSamplerConfig::default(),
            &schedule,
            &mut rng(6),
        )
        .unwrap();
        head.compatible_with(&world).unwrap();
    }

    #[test]
    fn balanced_training_matches_standard_on_flat_counts() {
        // With uniform class counts there is no tail to rebalance, so
        // class-balanced batches and uniform image sampling draw from the
        // same distribution and the two modes should score about equally.
        let world = generate_world(&WorldConfig {
            seed: 11,
            num_categories: 20,
            feature_dim: 16,
            zipf_skew: 0.0,
            total_instances: 1800,
            feature_noise_sigma: 2.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let schedule = TrainSchedule {
            total_epochs: 6,
            lr_drop_epochs: vec![4],
            ..TrainSchedule::default()
        };
        let standard = train_standard(&world, &schedule, &mut rng(3)).unwrap();
        let balanced = train_balanced(
            &world,
            None,
            &BalancedSamplerConfig {
                classes_per_step: 8,
                ..BalancedSamplerConfig::default()
            },
            &schedule,
            &mut rng(4),
        )
        .unwrap();
        let overall = |head: &Head| {
            let (proposals, scores) = head.score_images(&world, &world.val_images).unwrap();
            let dets = crate::twostage::decode_detections(
                &scores,
                &proposals,
                &crate::twostage::DecodeConfig::default(),
            )
            .unwrap();
            let gt = crate::eval::GtSet::from_images(&world.val_images);
            crate::eval::evaluate_detections(
                &dets,
                &gt,
                &world.categories,
                &crate::eval::EvalConfig::default(),
            )
            .unwrap()
            .overall_ap
            .unwrap()
        };
        let (s, b) = (overall(&standard), overall(&balanced));
        assert!(
            (s - b).abs() <= 0.1 * s.max(b),
            "standard {s:.4} vs balanced {b:.4} differ by more than 10%"
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.json");
        let mut r = rng(12);
        let head = Head::init((0..7).collect(), 16, &mut r);
        save_head(&head, "fp-abc123", &path).unwrap();
        let (back, fp) = load_head(&path).unwrap();
        assert_eq!(back, head);
        assert_eq!(fp, "fp-abc123");
    }

    #[test]
    fn checkpoint_rejects_inconsistent_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.json");
        std::fs::write(
            &path,
            r#"{"class_order":[0,1],"feature_dim":3,"weights":[[0.1,0.2,0.3],[0.0,0.0,0.0]],"biases":[0.0,0.0,0.0],"world_fingerprint":"x"}"#,
        )
        .unwrap();
        assert!(load_head(&path).is_err());
    }
}
