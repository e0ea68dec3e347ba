//! Synthetic preference-pair datasets with controllable contrast strength,
//! plus the line-delimited persistence format.
//!
//! Each pair gets its own query and a fresh chosen image (unit embedding,
//! patches on a jittered grid). The rejected image is derived from the chosen
//! one by a drift of size δ: the embedding is rotated toward a random
//! orthogonal direction by θ = δ·π/2 (so the cosine between the two
//! embeddings is cos θ by construction), and a δ-sized fraction of patch
//! features receives δ-scaled noise. Small δ therefore means near-identical
//! images (high proximity, low transport discrepancy); large δ the reverse.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::difficulty::{ImageRecord, Patch};
use crate::floatfmt::{FloatField, FloatMode};
use crate::model::{Context, ImageId, PairId, QueryId, ResponseId};
use crate::objectives::PreferencePair;
use crate::seeding;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
}

/// How far the rejected image drifts from the chosen one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DeltaSpec {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl DeltaSpec {
    fn validate(&self) -> Result<(), DataError> {
        match *self {
            DeltaSpec::Fixed { value } => {
                if !value.is_finite() || value < 0.0 {
                    return Err(DataError::Config(format!(
                        "delta must be non-negative, got {value}"
                    )));
                }
            }
            DeltaSpec::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || hi < lo {
                    return Err(DataError::Config(format!(
                        "delta range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            DeltaSpec::Fixed { value } => value,
            DeltaSpec::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_pairs: u32,
    pub embedding_dim: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub delta: DeltaSpec,
    pub response_vocab_size: u32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_pairs: 600,
            embedding_dim: 8,
            patch_count: 9,
            patch_dim: 4,
            delta: DeltaSpec::Uniform { lo: 0.05, hi: 1.0 },
            response_vocab_size: 8,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_pairs == 0 {
            return Err(DataError::Config("n_pairs must be positive".into()));
        }
        if self.embedding_dim < 2 {
            return Err(DataError::Config(format!(
                "embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        if self.patch_count == 0 {
            return Err(DataError::Config("patch_count must be positive".into()));
        }
        if self.patch_dim == 0 {
            return Err(DataError::Config("patch_dim must be positive".into()));
        }
        if self.response_vocab_size < 2 {
            return Err(DataError::Config(format!(
                "response_vocab_size must be at least 2 for distinct responses, got {}",
                self.response_vocab_size
            )));
        }
        self.delta.validate()
    }
}

/// A complete dataset: images, queries, preference pairs and the generation
/// config (including the seed) as provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub images: Vec<ImageRecord>,
    pub queries: Vec<QueryId>,
    pub pairs: Vec<PreferencePair>,
    pub provenance: GenConfig,
}

impl DatasetBundle {
    /// Referential integrity plus the per-record invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.image_id) {
                return Err(DataError::Validation(format!(
                    "duplicate image id {}",
                    img.image_id
                )));
            }
            let norm: f64 = img.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(DataError::Validation(format!(
                    "image {} embedding norm {norm} is not 1",
                    img.image_id
                )));
            }
            if img.patches.is_empty() || img.patches.len() > self.provenance.patch_count {
                return Err(DataError::Validation(format!(
                    "image {} has {} patches, expected 1..={}",
                    img.image_id,
                    img.patches.len(),
                    self.provenance.patch_count
                )));
            }
            for patch in &img.patches {
                if patch.position.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(DataError::Validation(format!(
                        "image {} has a patch outside the unit square",
                        img.image_id
                    )));
                }
            }
        }
        let query_ids: HashSet<QueryId> = self.queries.iter().copied().collect();
        if query_ids.len() != self.queries.len() {
            return Err(DataError::Validation("duplicate query id".into()));
        }
        let mut pair_ids = HashSet::new();
        for pair in &self.pairs {
            if !pair_ids.insert(pair.pair_id) {
                return Err(DataError::Validation(format!("duplicate pair id {}", pair.pair_id)));
            }
            pair.validate().map_err(DataError::Validation)?;
            for image in [pair.chosen_image, pair.rejected_image] {
                if !image_ids.contains(&image) {
                    return Err(DataError::Validation(format!(
                        "pair {} references unknown image id {image}",
                        pair.pair_id
                    )));
                }
            }
            if !query_ids.contains(&pair.query_id) {
                return Err(DataError::Validation(format!(
                    "pair {} references unknown query id {}",
                    pair.pair_id, pair.query_id
                )));
            }
            for response in [pair.chosen_response, pair.rejected_response] {
                if response.0 >= self.provenance.response_vocab_size {
                    return Err(DataError::Validation(format!(
                        "pair {} references response id {response} outside the vocab of {}",
                        pair.pair_id, self.provenance.response_vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every context a policy over this dataset needs, in first-seen order:
    /// per pair the chosen-image, rejected-image and image-free contexts.
    pub fn contexts(&self) -> Vec<Context> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for pair in &self.pairs {
            for c in [pair.chosen_context(), pair.rejected_context(), pair.text_only_context()] {
                if seen.insert(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// The response vocabulary declared by the provenance config.
    pub fn vocab(&self) -> Vec<ResponseId> {
        (0..self.provenance.response_vocab_size).map(ResponseId).collect()
    }
}

fn sample_unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A unit vector orthogonal to `base` (Gram-Schmidt on a random draw).
fn sample_orthogonal_unit(base: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..base.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dot: f64 = raw.iter().zip(base).map(|(r, b)| r * b).sum();
        let mut v: Vec<f64> = raw.iter().zip(base).map(|(r, b)| r - dot * b).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            return v;
        }
    }
}

fn jittered_grid_patches(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Patch> {
    let grid = (count as f64).sqrt().ceil() as usize;
    let cell = 1.0 / grid as f64;
    (0..count)
        .map(|k| {
            let row = k / grid;
            let col = k % grid;
            let jx = (rng.random::<f64>() - 0.5) * 0.8 * cell;
            let jy = (rng.random::<f64>() - 0.5) * 0.8 * cell;
            let x = (col as f64 + 0.5) * cell + jx;
            let y = (row as f64 + 0.5) * cell + jy;
            Patch {
                feature: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                position: [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)],
            }
        })
        .collect()
}

/// Deterministic synthetic generation. Each pair draws from its own RNG
/// substream, so bundles are reproducible bit for bit under a fixed config.
pub fn generate(config: &GenConfig) -> Result<DatasetBundle, DataError> {
    config.validate()?;
    let mut images = Vec::with_capacity(2 * config.n_pairs as usize);
    let mut queries = Vec::with_capacity(config.n_pairs as usize);
    let mut pairs = Vec::with_capacity(config.n_pairs as usize);

    for i in 0..config.n_pairs {
        let mut rng = seeding::stream(config.seed, "gen/pair", u64::from(i));
        let delta = config.delta.sample(&mut rng);

        let embedding_w = sample_unit_vector(config.embedding_dim, &mut rng);
        let patches_w = jittered_grid_patches(config.patch_count, config.patch_dim, &mut rng);

        // Rejected image: rotate the embedding by θ = δ·π/2 toward a random
        // orthogonal direction, so the cosine to the original is cos θ.
        let theta = delta * std::f64::consts::FRAC_PI_2;
        let embedding_l = if theta == 0.0 {
            embedding_w.clone()
        } else {
            let ortho = sample_orthogonal_unit(&embedding_w, &mut rng);
            let mut v: Vec<f64> = embedding_w
                .iter()
                .zip(&ortho)
                .map(|(e, u)| theta.cos() * e + theta.sin() * u)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= norm;
            }
            v
        };

        // Perturb a δ-sized fraction of the patch features with δ-scaled noise.
        let mut patches_l = patches_w.clone();
        let perturbed = ((delta * config.patch_count as f64).ceil() as usize).min(config.patch_count);
        if perturbed > 0 {
            let mut indices: Vec<usize> = (0..config.patch_count).collect();
            for k in 0..perturbed {
                let swap = k + rng.random_range(0..(config.patch_count - k));
                indices.swap(k, swap);
            }
            for &idx in &indices[..perturbed] {
                for f in patches_l[idx].feature.iter_mut() {
                    *f += delta * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }

        let chosen_response = ResponseId(rng.random_range(0..config.response_vocab_size));
        let mut rejected = rng.random_range(0..config.response_vocab_size - 1);
        if rejected >= chosen_response.0 {
            rejected += 1;
        }

        let chosen_image = ImageId(2 * i);
        let rejected_image = ImageId(2 * i + 1);
        images.push(ImageRecord { image_id: chosen_image, embedding: embedding_w, patches: patches_w });
        images.push(ImageRecord { image_id: rejected_image, embedding: embedding_l, patches: patches_l });
        queries.push(QueryId(i));
        pairs.push(PreferencePair {
            pair_id: PairId(i),
            query_id: QueryId(i),
            chosen_image,
            rejected_image,
            chosen_response,
            rejected_response: ResponseId(rejected),
        });
    }

    let bundle = DatasetBundle { images, queries, pairs, provenance: config.clone() };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Bundle file: one JSON record per line.
//
// Line 1 is the header (format, version, float mode, counts), line 2 the
// provenance config, then all image records, all query records and all pair
// records, in that order. Bulk float arrays are encoded per the header's
// float mode; provenance scalars are plain JSON numbers (shortest round-trip
// decimals, which parse back to identical bits).
// ---------------------------------------------------------------------------

pub const BUNDLE_FORMAT: &str = "scpo-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum BundleLine {
    Header {
        format: String,
        version: u32,
        float_mode: FloatMode,
        images: usize,
        queries: usize,
        pairs: usize,
    },
    Provenance {
        config: GenConfig,
    },
    Image {
        id: u32,
        embedding: Vec<FloatField>,
        patches: Vec<PatchLine>,
    },
    Query {
        id: u32,
    },
    Pair {
        id: u32,
        query: u32,
        chosen_image: u32,
        rejected_image: u32,
        chosen_response: u32,
        rejected_response: u32,
    },
}

#[derive(Serialize, Deserialize)]
struct PatchLine {
    feature: Vec<FloatField>,
    position: [FloatField; 2],
}

fn encode_image(img: &ImageRecord, mode: FloatMode) -> BundleLine {
    BundleLine::Image {
        id: img.image_id.0,
        embedding: img.embedding.iter().map(|v| FloatField::encode(*v, mode)).collect(),
        patches: img
            .patches
            .iter()
            .map(|p| PatchLine {
                feature: p.feature.iter().map(|v| FloatField::encode(*v, mode)).collect(),
                position: [
                    FloatField::encode(p.position[0], mode),
                    FloatField::encode(p.position[1], mode),
                ],
            })
            .collect(),
    }
}

pub fn write_bundle(bundle: &DatasetBundle, path: &Path, mode: FloatMode) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = |line: &BundleLine| -> Result<(), DataError> {
        let text = serde_json::to_string(line)
            .map_err(|e| DataError::Validation(format!("serialization failed: {e}")))?;
        writeln!(w, "{text}").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    emit(&BundleLine::Header {
        format: BUNDLE_FORMAT.to_string(),
        version: BUNDLE_VERSION,
        float_mode: mode,
        images: bundle.images.len(),
        queries: bundle.queries.len(),
        pairs: bundle.pairs.len(),
    })?;
    emit(&BundleLine::Provenance { config: bundle.provenance.clone() })?;
    for img in &bundle.images {
        emit(&encode_image(img, mode))?;
    }
    for q in &bundle.queries {
        emit(&BundleLine::Query { id: q.0 })?;
    }
    for p in &bundle.pairs {
        emit(&BundleLine::Pair {
            id: p.pair_id.0,
            query: p.query_id.0,
            chosen_image: p.chosen_image.0,
            rejected_image: p.rejected_image.0,
            chosen_response: p.chosen_response.0,
            rejected_response: p.rejected_response.0,
        })?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

struct LineReader<I: Iterator<Item = std::io::Result<String>>> {
    lines: I,
    line_no: usize,
    path: String,
}

impl<I: Iterator<Item = std::io::Result<String>>> LineReader<I> {
    fn next_record(&mut self, expected: &str) -> Result<BundleLine, DataError> {
        loop {
            self.line_no += 1;
            match self.lines.next() {
                None => {
                    return Err(DataError::Parse {
                        line: self.line_no,
                        message: format!("unexpected end of file, expected {expected}"),
                    })
                }
                Some(Err(source)) => {
                    return Err(DataError::Io { path: self.path.clone(), source })
                }
                Some(Ok(line)) if line.trim().is_empty() => continue,
                Some(Ok(line)) => {
                    return serde_json::from_str::<BundleLine>(&line).map_err(|e| {
                        DataError::Parse { line: self.line_no, message: e.to_string() }
                    })
                }
            }
        }
    }
}

pub fn read_bundle(path: &Path) -> Result<DatasetBundle, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut reader = LineReader {
        lines: BufReader::new(file).lines(),
        line_no: 0,
        path: path.display().to_string(),
    };

    let (mode, n_images, n_queries, n_pairs) = match reader.next_record("header")? {
        BundleLine::Header { format, version, float_mode, images, queries, pairs } => {
            if format != BUNDLE_FORMAT {
                return Err(DataError::Parse {
                    line: reader.line_no,
                    message: format!("format {format:?}, expected {BUNDLE_FORMAT:?}"),
                });
            }
            if version != BUNDLE_VERSION {
                return Err(DataError::Parse {
                    line: reader.line_no,
                    message: format!("version {version}, expected {BUNDLE_VERSION}"),
                });
            }
            (float_mode, images, queries, pairs)
        }
        _ => {
            return Err(DataError::Parse {
                line: reader.line_no,
                message: "expected header record".into(),
            })
        }
    };

    let provenance = match reader.next_record("provenance")? {
        BundleLine::Provenance { config } => config,
        _ => {
            return Err(DataError::Parse {
                line: reader.line_no,
                message: "expected provenance record".into(),
            })
        }
    };

    let mut images = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        match reader.next_record("image record")? {
            BundleLine::Image { id, embedding, patches } => {
                let line = reader.line_no;
                let dec = |f: &FloatField| {
                    f.decode(mode).map_err(|e| DataError::Parse { line, message: e.to_string() })
                };
                let embedding =
                    embedding.iter().map(dec).collect::<Result<Vec<_>, _>>()?;
                let patches = patches
                    .iter()
                    .map(|p| {
                        Ok(Patch {
                            feature: p.feature.iter().map(dec).collect::<Result<Vec<_>, _>>()?,
                            position: [dec(&p.position[0])?, dec(&p.position[1])?],
                        })
                    })
                    .collect::<Result<Vec<_>, DataError>>()?;
                images.push(ImageRecord { image_id: ImageId(id), embedding, patches });
            }
            _ => {
                return Err(DataError::Parse {
                    line: reader.line_no,
                    message: "expected image record".into(),
                })
            }
        }
    }

    let mut queries = Vec::with_capacity(n_queries);
    for _ in 0..n_queries {
        match reader.next_record("query record")? {
            BundleLine::Query { id } => queries.push(QueryId(id)),
            _ => {
                return Err(DataError::Parse {
                    line: reader.line_no,
                    message: "expected query record".into(),
                })
            }
        }
    }

    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        match reader.next_record("pair record")? {
            BundleLine::Pair { id, query, chosen_image, rejected_image, chosen_response, rejected_response } => {
                pairs.push(PreferencePair {
                    pair_id: PairId(id),
                    query_id: QueryId(query),
                    chosen_image: ImageId(chosen_image),
                    rejected_image: ImageId(rejected_image),
                    chosen_response: ResponseId(chosen_response),
                    rejected_response: ResponseId(rejected_response),
                });
            }
            _ => {
                return Err(DataError::Parse {
                    line: reader.line_no,
                    message: "expected pair record".into(),
                })
            }
        }
    }

    let bundle = DatasetBundle { images, queries, pairs, provenance };
    bundle.validate()?;
    Ok(bundle)
}
