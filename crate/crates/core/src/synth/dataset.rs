use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{phrasings, weighted_phrasings, SceneDescriptor, SceneObject, ATTRIBUTES, ENTITIES, MAX_OBJECTS, RELATIONS, VOCAB};
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::model::{ImageFeatures, TokenId};

pub const DATASET_FORMAT: &str = "naic-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub refs_per_image: usize,
    /// Longest admissible reference, period included.
    pub max_len: usize,
    pub num_regions: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-region noise.
    pub noise: f64,
    /// Seed of the fixed scene-to-feature projection, shared by all splits.
    pub projection_seed: u64,
    /// Relative frequency of scenes with 1, 2 and 3 objects.
    pub object_weights: [f64; MAX_OBJECTS],
    /// Zipf exponent over alternative phrasings; 0 samples references
    /// uniformly.
    pub phrasing_skew: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            refs_per_image: 5,
            max_len: 16,
            num_regions: 4,
            feature_dim: 32,
            noise: 0.1,
            projection_seed: 1009,
            object_weights: [0.2, 0.4, 0.4],
            phrasing_skew: 1.0,
        }
    }
}

/// Smallest number of admissible phrasings over all scenes: the wrappers
/// times one phrasing per slot for the longest chain.
fn min_phrasings(max_len: usize) -> usize {
    let worst = SceneDescriptor {
        objects: (0..MAX_OBJECTS)
            .map(|i| SceneObject {
                entity: 5,
                attribute: 0,
                relation: (i > 0).then_some(3),
            })
            .collect(),
    };
    phrasings(&worst, max_len).len()
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_regions < MAX_OBJECTS {
            return invalid(format!("need at least {MAX_OBJECTS} regions, got {}", self.num_regions));
        }
        if self.feature_dim == 0 || !(self.noise >= 0.0) {
            return invalid("feature_dim must be positive and noise non-negative");
        }
        if !(self.phrasing_skew >= 0.0 && self.phrasing_skew.is_finite()) {
            return invalid("phrasing_skew must be finite and non-negative");
        }
        if self.object_weights.iter().any(|w| !(*w >= 0.0)) || self.object_weights.iter().sum::<f64>() <= 0.0 {
            return invalid("object weights must be non-negative with a positive sum");
        }
        if self.refs_per_image == 0 {
            return invalid("refs_per_image must be >= 1");
        }
        let available = min_phrasings(self.max_len);
        if self.refs_per_image > available {
            return invalid(format!(
                "{} distinct references requested but some scenes only have {available} phrasings within {} tokens",
                self.refs_per_image, self.max_len
            ));
        }
        Ok(())
    }

    fn one_hot_dim(&self) -> usize {
        (ENTITIES.len() + 1) + (ATTRIBUTES.len() + 1) + (RELATIONS.len() + 1) + self.num_regions
    }

    /// The fixed projection from per-region one-hot codes to features.
    pub fn projection(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.projection_seed);
        Tensor::from_fn(self.one_hot_dim(), self.feature_dim, |_, _| rng.gen_range(-1.0..1.0))
    }
}

/// Dataset partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            _ => invalid(format!("unknown split {s:?}")),
        }
    }
}

/// One image with its scene and reference captions (none when unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    pub scene: SceneDescriptor,
    pub image: ImageFeatures,
    pub references: Vec<Vec<TokenId>>,
}

/// Requested split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unlabeled: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
            unlabeled: 4000,
        }
    }
}

fn random_scene(rng: &mut ChaCha8Rng, weights: &[f64; MAX_OBJECTS]) -> SceneDescriptor {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    let mut count = MAX_OBJECTS;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            count = i + 1;
            break;
        }
        x -= w;
    }
    let objects = (0..count)
        .map(|i| SceneObject {
            entity: rng.gen_range(0..ENTITIES.len()),
            attribute: rng.gen_range(0..ATTRIBUTES.len()),
            relation: (i > 0).then(|| rng.gen_range(0..RELATIONS.len())),
        })
        .collect();
    SceneDescriptor { objects }
}

/// Feature matrix of a scene: projected one-hot codes plus uniform noise
/// with standard deviation `config.noise`. Regions beyond the scene's
/// objects encode "no object".
pub fn scene_features(
    scene: &SceneDescriptor,
    config: &GrammarConfig,
    projection: &Tensor,
    rng: &mut ChaCha8Rng,
) -> ImageFeatures {
    let (ne, na, nr) = (ENTITIES.len() + 1, ATTRIBUTES.len() + 1, RELATIONS.len() + 1);
    let half_width = config.noise * 3f64.sqrt();
    let mut data = Vec::with_capacity(config.num_regions * config.feature_dim);
    for region in 0..config.num_regions {
        let mut hot = [ENTITIES.len(), ne + ATTRIBUTES.len(), ne + na + RELATIONS.len(), ne + na + nr + region];
        if let Some(o) = scene.objects.get(region) {
            hot[0] = o.entity;
            hot[1] = ne + o.attribute;
            hot[2] = ne + na + o.relation.unwrap_or(RELATIONS.len());
        }
        for j in 0..config.feature_dim {
            let clean: f64 = hot.iter().map(|&h| projection.at(h, j)).sum();
            let noise = if half_width > 0.0 {
                rng.gen_range(-half_width..half_width)
            } else {
                0.0
            };
            data.push(clean + noise);
        }
    }
    ImageFeatures::new(Tensor::matrix(config.num_regions, config.feature_dim, data).expect("sized above"))
        .expect("non-empty")
}

fn draw_unique(
    rng: &mut ChaCha8Rng,
    config: &GrammarConfig,
    taken: &mut HashSet<SceneDescriptor>,
    count: usize,
) -> Result<Vec<SceneDescriptor>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return invalid(format!("grammar cannot supply {count} distinct scenes"));
        }
        let s = random_scene(rng, &config.object_weights);
        if taken.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Labeled train, val and test splits, disjoint by scene, followed by the
/// unlabeled images (scenes drawn apart from the val and test scenes).
/// Deterministic per seed.
pub fn generate_dataset(seed: u64, sizes: SplitSizes, config: &GrammarConfig) -> Result<Vec<DatasetRecord>> {
    config.validate()?;
    if sizes.train + sizes.val + sizes.test == 0 {
        return invalid("dataset size must be >= 1");
    }
    let projection = config.projection();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let mut records = Vec::new();
    for (split, n) in [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)] {
        for (i, scene) in draw_unique(&mut rng, config, &mut taken, n)?.into_iter().enumerate() {
            let image = scene_features(&scene, config, &projection, &mut rng);
            let options = weighted_phrasings(&scene, config.max_len, config.phrasing_skew);
            let references = options
                .choose_multiple_weighted(&mut rng, config.refs_per_image, |o| o.1)
                .map_err(|e| Error::InvalidArgument(format!("reference sampling: {e}")))?
                .map(|o| o.0.clone())
                .collect();
            records.push(DatasetRecord {
                id: format!("{}-{i:06}", split.name()),
                split,
                scene,
                image,
                references,
            });
        }
    }
    let held_out: HashSet<SceneDescriptor> = records
        .iter()
        .filter(|r| matches!(r.split, Split::Val | Split::Test))
        .map(|r| r.scene.clone())
        .collect();
    records.extend(generate_unlabeled(seed ^ (0x005e_ed0f_u64 << 20), sizes.unlabeled, config, &held_out)?);
    Ok(records)
}

/// Images without references. Scenes in `exclude` are never drawn.
pub fn generate_unlabeled(
    seed: u64,
    size: usize,
    config: &GrammarConfig,
    exclude: &HashSet<SceneDescriptor>,
) -> Result<Vec<DatasetRecord>> {
    config.validate()?;
    let projection = config.projection();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while out.len() < size {
        attempts += 1;
        if attempts > 100 * size + 1000 {
            return invalid(format!("grammar cannot supply {size} unlabeled scenes"));
        }
        let scene = random_scene(&mut rng, &config.object_weights);
        if exclude.contains(&scene) {
            continue;
        }
        let image = scene_features(&scene, config, &projection, &mut rng);
        out.push(DatasetRecord {
            id: format!("unlabeled-{:06}", out.len()),
            split: Split::Unlabeled,
            scene,
            image,
            references: Vec::new(),
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab: Vec<String>,
    grammar: GrammarConfig,
    /// Field order of every record line.
    fields: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMatrix {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    split: Split,
    scene: SceneDescriptor,
    features: FeatureMatrix,
    references: Vec<Vec<TokenId>>,
}

const FIELDS: [&str; 5] = ["id", "split", "scene", "features", "references"];

/// A generated dataset and the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grammar: GrammarConfig,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn generate(seed: u64, sizes: SplitSizes, grammar: GrammarConfig) -> Result<Self> {
        let records = generate_dataset(seed, sizes, &grammar)?;
        Ok(Self { grammar, records })
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// JSON lines: a versioned header, then one record per line.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            vocab: VOCAB.iter().map(|s| s.to_string()).collect(),
            grammar: self.grammar.clone(),
            fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let t = r.image.tensor();
            let line = RecordLine {
                id: r.id.clone(),
                split: r.split,
                scene: r.scene.clone(),
                features: FeatureMatrix {
                    shape: [t.rows(), t.cols()],
                    data: t.data().to_vec(),
                },
                references: r.references.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "dataset",
            detail,
        };
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        if header.vocab != VOCAB {
            return Err(bad("vocabulary differs from this build".into()));
        }
        if header.fields != FIELDS {
            return Err(bad(format!("unexpected field order {:?}", header.fields)));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| bad(format!("record {n}: {e}")))?;
            rec.scene.validate()?;
            let [rows, cols] = rec.features.shape;
            let image = ImageFeatures::new(Tensor::matrix(rows, cols, rec.features.data)?)?;
            if rec.references.iter().flatten().any(|&t| t >= VOCAB.len()) {
                return Err(bad(format!("record {n}: token outside the vocabulary")));
            }
            records.push(DatasetRecord {
                id: rec.id,
                split: rec.split,
                scene: rec.scene,
                image,
                references: rec.references,
            });
        }
        Ok(Self {
            grammar: header.grammar,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.write(File::create(&tmp)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}
