//! Synthetic world generation.
//!
//! A world is a category table with Zipf-distributed instance counts, one
//! feature prototype per category, and packed train/val scene images. The
//! proposal generator stands in for a frozen backbone plus RPN: proposals for
//! an image are derived from the world seed and the image id alone, so every
//! consumer sees the same proposals without storing them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geom::{iou, Rect};
use crate::{Error, Result};

/// Category count bin. Bin membership is always decided by the training
/// count, also when evaluating on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinId {
    Lt10,
    Lt100,
    Lt1000,
    Ge1000,
}

impl BinId {
    pub const ALL: [BinId; 4] = [BinId::Lt10, BinId::Lt100, BinId::Lt1000, BinId::Ge1000];

    pub fn index(self) -> usize {
        match self {
            BinId::Lt10 => 0,
            BinId::Lt100 => 1,
            BinId::Lt1000 => 2,
            BinId::Ge1000 => 3,
        }
    }

    /// Token used in CSV output, stable across versions.
    pub fn token(self) -> &'static str {
        match self {
            BinId::Lt10 => "lt10",
            BinId::Lt100 => "lt100",
            BinId::Lt1000 => "lt1000",
            BinId::Ge1000 => "ge1000",
        }
    }

    /// Human-readable count interval.
    pub fn label(self) -> &'static str {
        match self {
            BinId::Lt10 => "(0,10)",
            BinId::Lt100 => "[10,100)",
            BinId::Lt1000 => "[100,1000)",
            BinId::Ge1000 => "[1000,inf)",
        }
    }
}

/// Maps an instance count to its bin. Half-open on the right: 9 is still
/// `(0,10)`, 10 is `[10,100)`, 999 is `[100,1000)`, 1000 is `[1000,inf)`.
pub fn assign_bin(count: u64) -> BinId {
    match count {
        0..=9 => BinId::Lt10,
        10..=99 => BinId::Lt100,
        100..=999 => BinId::Lt1000,
        _ => BinId::Ge1000,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub train_count: u64,
    pub bin: BinId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: Rect,
    pub category_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub id: u64,
    pub objects: Vec<GtObject>,
}

/// Region proposal with its pooled feature. Not persisted: proposals are
/// recomputed on demand from the world seed (see [`World::frozen_proposals`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: u64,
    pub bbox: Rect,
    pub feature: Vec<f64>,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_categories: usize,
    pub feature_dim: usize,
    pub zipf_skew: f64,
    pub total_instances: u64,
    /// Inclusive range of ground-truth objects packed per image; the last
    /// image of a split may hold fewer.
    pub objects_per_image: (usize, usize),
    /// Probability that a ground-truth object receives a proposal.
    pub proposal_recall: f64,
    /// Corner jitter of positive proposals, as a fraction of box extent.
    pub box_jitter: f64,
    /// Feature noise scale; the effective sigma for a proposal is
    /// `feature_noise_sigma * (1 - IoU with its object)`.
    pub feature_noise_sigma: f64,
    pub background_per_image: usize,
    /// Expected fraction of each category's training count that appears in
    /// the validation split (binomially thinned, so rare categories can be
    /// absent from val entirely).
    pub val_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            num_categories: 100,
            feature_dim: 32,
            zipf_skew: 1.6,
            total_instances: 20_000,
            objects_per_image: (2, 8),
            proposal_recall: 0.9,
            box_jitter: 0.05,
            feature_noise_sigma: 10.0,
            background_per_image: 5,
            val_fraction: 0.25,
        }
    }
}

impl WorldConfig {
    /// Hex SHA-256 of the canonical JSON form. Two configs fingerprint
    /// equally iff they generate the same world, so checkpoints and score
    /// matrices tagged with it can be checked for compatibility.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::config("num_categories must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be at least 1"));
        }
        if !self.zipf_skew.is_finite() || self.zipf_skew < 0.0 {
            return Err(Error::config("zipf_skew must be finite and non-negative"));
        }
        if self.total_instances < self.num_categories as u64 {
            return Err(Error::config(format!(
                "total_instances ({}) must cover at least one instance per category ({})",
                self.total_instances, self.num_categories
            )));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "objects_per_image range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.proposal_recall) {
            return Err(Error::config("proposal_recall must lie in [0, 1]"));
        }
        if !self.box_jitter.is_finite() || self.box_jitter < 0.0 {
            return Err(Error::config("box_jitter must be finite and non-negative"));
        }
        if !self.feature_noise_sigma.is_finite() || self.feature_noise_sigma < 0.0 {
            return Err(Error::config("feature_noise_sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Splits `total` instances over `num_categories` ranks with Zipf weight
/// `rank^-skew`: weights are normalized, scaled to `total`, rounded, floored
/// at one instance per category, and the rounding remainder is folded into
/// rank 1. Returns counts sorted non-increasing, summing to `total`.
pub fn sample_counts(num_categories: usize, skew: f64, total: u64) -> Result<Vec<u64>> {
    if num_categories == 0 {
        return Err(Error::config("num_categories must be at least 1"));
    }
    if !skew.is_finite() || skew < 0.0 {
        return Err(Error::config("skew must be finite and non-negative"));
    }
    if total < num_categories as u64 {
        return Err(Error::config(format!(
            "total ({total}) must be at least num_categories ({num_categories})"
        )));
    }

    let weights: Vec<f64> = (1..=num_categories)
        .map(|rank| (rank as f64).powf(-skew))
        .collect();
    let norm: f64 = weights.iter().sum();
    let mut counts: Vec<u64> = weights
        .iter()
        .map(|w| ((w / norm) * total as f64).round().max(1.0) as u64)
        .collect();

    let assigned: u64 = counts.iter().sum();
    let remainder = total as i64 - assigned as i64;
    let head = counts[0] as i64 + remainder;
    if head < 1 {
        return Err(Error::config(format!(
            "cannot allocate {total} instances over {num_categories} categories at skew {skew} \
             with positive counts"
        )));
    }
    counts[0] = head as u64;
    counts.sort_unstable_by(|a, b| b.cmp(a));
    debug_assert_eq!(counts.iter().sum::<u64>(), total);
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub categories: Vec<Category>,
    pub prototypes: Vec<Vec<f64>>,
    pub train_images: Vec<SceneImage>,
    pub val_images: Vec<SceneImage>,
}

const BOX_MIN_SIDE: f64 = 0.05;
const BOX_MAX_SIDE: f64 = 0.30;
const MIN_BOX_EXTENT: f64 = 1e-3;

// Distinct generator streams derived from the world seed, so that a change
// in how one stage consumes randomness cannot shift the others.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_TRAIN_PACK: u64 = 2;
const STREAM_VAL_COUNTS: u64 = 3;
const STREAM_VAL_PACK: u64 = 4;
const STREAM_PROPOSALS: u64 = 5;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream_rng(seed: u64, stream: u64, salt: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ salt);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn random_box(rng: &mut ChaCha8Rng) -> Rect {
    let w = rng.random_range(BOX_MIN_SIDE..BOX_MAX_SIDE);
    let h = rng.random_range(BOX_MIN_SIDE..BOX_MAX_SIDE);
    let x1 = rng.random_range(0.0..(1.0 - w));
    let y1 = rng.random_range(0.0..(1.0 - h));
    Rect {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

fn jitter_box(b: &Rect, jitter: f64, rng: &mut ChaCha8Rng) -> Rect {
    if jitter == 0.0 {
        return *b;
    }
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let nx = Normal::new(0.0, jitter * w).expect("finite jitter");
    let ny = Normal::new(0.0, jitter * h).expect("finite jitter");
    let x1 = (b.x1 + nx.sample(rng)).clamp(0.0, 1.0 - MIN_BOX_EXTENT);
    let y1 = (b.y1 + ny.sample(rng)).clamp(0.0, 1.0 - MIN_BOX_EXTENT);
    let x2 = (b.x2 + nx.sample(rng)).clamp(x1 + MIN_BOX_EXTENT, 1.0);
    let y2 = (b.y2 + ny.sample(rng)).clamp(y1 + MIN_BOX_EXTENT, 1.0);
    Rect { x1, y1, x2, y2 }
}

/// Packs one label per instance into images holding `objects_per_image`
/// objects each (the final image takes the remainder). Labels are shuffled
/// first, so category co-occurrence is random.
fn pack_images(
    counts: &[u64],
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
    first_image_id: u64,
) -> Vec<SceneImage> {
    let mut labels: Vec<u32> = Vec::new();
    for (cat, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(cat as u32, count as usize));
    }
    labels.shuffle(rng);

    let (lo, hi) = cfg.objects_per_image;
    let mut images = Vec::new();
    let mut next = 0usize;
    let mut id = first_image_id;
    while next < labels.len() {
        let want = rng.random_range(lo..=hi);
        let take = want.min(labels.len() - next);
        let objects = labels[next..next + take]
            .iter()
            .map(|&category_id| GtObject {
                bbox: random_box(rng),
                category_id,
            })
            .collect();
        images.push(SceneImage { id, objects });
        next += take;
        id += 1;
    }
    images
}

/// Generates a complete world from its config. Deterministic: equal configs
/// produce equal worlds.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let counts = sample_counts(cfg.num_categories, cfg.zipf_skew, cfg.total_instances)?;
    let categories: Vec<Category> = counts
        .iter()
        .enumerate()
        .map(|(id, &train_count)| Category {
            id: id as u32,
            train_count,
            bin: assign_bin(train_count),
        })
        .collect();

    let mut proto_rng = stream_rng(cfg.seed, STREAM_PROTOTYPES, 0);
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_categories)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| proto_rng.sample(StandardNormal))
                .collect()
        })
        .collect();

    let mut train_rng = stream_rng(cfg.seed, STREAM_TRAIN_PACK, 0);
    let train_images = pack_images(&counts, cfg, &mut train_rng, 0);

    let mut val_count_rng = stream_rng(cfg.seed, STREAM_VAL_COUNTS, 0);
    let val_counts: Vec<u64> = counts
        .iter()
        .map(|&c| {
            if cfg.val_fraction == 0.0 {
                0
            } else {
                Binomial::new(c, cfg.val_fraction)
                    .expect("validated fraction")
                    .sample(&mut val_count_rng)
            }
        })
        .collect();
    let mut val_rng = stream_rng(cfg.seed, STREAM_VAL_PACK, 0);
    let val_images = pack_images(&val_counts, cfg, &mut val_rng, train_images.len() as u64);

    Ok(World {
        config: cfg.clone(),
        categories,
        prototypes,
        train_images,
        val_images,
    })
}

/// Simulated RPN output for one image: each ground-truth object receives a
/// proposal with probability `proposal_recall`, with jittered box, feature
/// `prototype + feature_noise_sigma * (1 - IoU) * n` for spherical standard
/// normal `n`, and objectness equal to its best IoU against the image's
/// ground truth. `background_per_image` random boxes with standard normal
/// features and objectness below 0.1 follow.
pub fn generate_proposals(
    image: &SceneImage,
    cfg: &WorldConfig,
    prototypes: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<Proposal> {
    let mut out = Vec::new();
    for obj in &image.objects {
        if rng.random::<f64>() >= cfg.proposal_recall {
            continue;
        }
        let bbox = jitter_box(&obj.bbox, cfg.box_jitter, rng);
        let own_iou = iou(&bbox, &obj.bbox);
        let noise = cfg.feature_noise_sigma * (1.0 - own_iou);
        let mut feature = prototypes[obj.category_id as usize].clone();
        if noise > 0.0 {
            for f in feature.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *f += noise * n;
            }
        }
        let objectness = image
            .objects
            .iter()
            .map(|o| iou(&bbox, &o.bbox))
            .fold(0.0, f64::max);
        out.push(Proposal {
            image_id: image.id,
            bbox,
            feature,
            objectness,
        });
    }
    for _ in 0..cfg.background_per_image {
        let bbox = random_box(rng);
        let feature = (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let objectness = rng.random_range(0.0..0.1);
        out.push(Proposal {
            image_id: image.id,
            bbox,
            feature,
            objectness,
        });
    }
    out
}

impl World {
    /// Proposals of the frozen backbone for one image. Derived from the
    /// world seed and the image id only, so repeated calls, other processes,
    /// and deserialized copies of the world all see identical proposals.
    pub fn frozen_proposals(&self, image: &SceneImage) -> Vec<Proposal> {
        let mut rng = stream_rng(self.config.seed, STREAM_PROPOSALS, image.id);
        generate_proposals(image, &self.config, &self.prototypes, &mut rng)
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn category(&self, id: u32) -> Option<&Category> {
        self.categories.get(id as usize)
    }

    /// Train-image indices per category.
    pub fn train_images_by_category(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, image) in self.train_images.iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            for obj in &image.objects {
                if seen.insert(obj.category_id) {
                    index.entry(obj.category_id).or_default().push(i);
                }
            }
        }
        index
    }

    /// Per-category instance frequency over the training split, as a
    /// fraction of all training instances.
    pub fn train_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.categories.len()];
        for image in &self.train_images {
            for obj in &image.objects {
                counts[obj.category_id as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.categories.len() != self.config.num_categories {
            return Err(Error::shape(format!(
                "category table has {} entries, config says {}",
                self.categories.len(),
                self.config.num_categories
            )));
        }
        for (i, cat) in self.categories.iter().enumerate() {
            if cat.id as usize != i {
                return Err(Error::config(format!(
                    "category ids must be contiguous from 0; found {} at position {i}",
                    cat.id
                )));
            }
            if cat.bin != assign_bin(cat.train_count) {
                return Err(Error::config(format!(
                    "category {} has bin {:?}, expected {:?} for count {}",
                    cat.id,
                    cat.bin,
                    assign_bin(cat.train_count),
                    cat.train_count
                )));
            }
        }
        if self.prototypes.len() != self.categories.len()
            || self.prototypes.iter().any(|p| p.len() != self.config.feature_dim)
        {
            return Err(Error::shape(format!(
                "prototypes must be {} x {}",
                self.categories.len(),
                self.config.feature_dim
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for image in self.train_images.iter().chain(&self.val_images) {
            if !ids.insert(image.id) {
                return Err(Error::config(format!("duplicate image id {}", image.id)));
            }
            for obj in &image.objects {
                if obj.category_id as usize >= self.categories.len() {
                    return Err(Error::config(format!(
                        "image {} references unknown category {}",
                        image.id, obj.category_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_file(path, serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = crate::read_to_string(path)?;
        let world: World = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        world.validate()?;
        Ok(world)
    }
}

/// Reads a `category_id,count` CSV (optional header) into a category table.
/// Malformed rows are reported with their line number.
pub fn read_count_csv(path: &Path) -> Result<Vec<Category>> {
    let text = crate::read_to_string(path)?;
    let mut cats: Vec<Category> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 2 fields `category_id,count`, found {}", fields.len()),
            });
        }
        if line == 1 && fields[0].parse::<u32>().is_err() {
            // Header row.
            continue;
        }
        let id: u32 = fields[0].parse().map_err(|_| Error::Record {
            path: path.to_path_buf(),
            line,
            msg: format!("invalid category id {:?}", fields[0]),
        })?;
        let count: u64 = fields[1].parse().map_err(|_| Error::Record {
            path: path.to_path_buf(),
            line,
            msg: format!("invalid count {:?}", fields[1]),
        })?;
        if !seen.insert(id) {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate category id {id}"),
            });
        }
        cats.push(Category {
            id,
            train_count: count,
            bin: assign_bin(count),
        });
    }
    Ok(cats)
}

/// Categories per bin, in bin order.
pub fn bin_histogram(categories: &[Category]) -> [usize; 4] {
    let mut hist = [0usize; 4];
    for cat in categories {
        hist[cat.bin.index()] += 1;
    }
    hist
}
