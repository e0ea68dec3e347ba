//! Tabular conditional policies.
//!
//! A [`PolicyTable`] holds one logit per (context, response) cell; the
//! conditional distribution over responses is the softmax of each row. Every
//! probability is therefore strictly positive and every log-ratio finite,
//! which keeps all preference losses and KL terms defined. Contexts pair an
//! image slot (a concrete image or the distinguished null slot for
//! image-free conditioning) with a query id.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::floatfmt::{decode_f64, encode_f64, FloatMode};
use crate::numeric::logsumexp;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ResponseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The image half of a conditioning tuple. `Null` is the image-free slot:
/// (Null, q) is a context of its own, distinct from every (image, q).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum ImageSlot {
    Null,
    Image(ImageId),
}

impl Serialize for ImageSlot {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ImageSlot::Null => serializer.serialize_none(),
            ImageSlot::Image(id) => serializer.serialize_some(&id.0),
        }
    }
}

impl<'de> Deserialize<'de> for ImageSlot {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match Option::<u32>::deserialize(deserializer)? {
            None => ImageSlot::Null,
            Some(id) => ImageSlot::Image(ImageId(id)),
        })
    }
}

impl fmt::Display for ImageSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSlot::Null => write!(f, "null"),
            ImageSlot::Image(id) => write!(f, "{id}"),
        }
    }
}

/// A conditioning tuple (image slot, query).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Context {
    #[serde(rename = "image")]
    pub image_slot: ImageSlot,
    #[serde(rename = "query")]
    pub query_id: QueryId,
}

impl Context {
    pub fn new(image_slot: ImageSlot, query_id: QueryId) -> Self {
        Self { image_slot, query_id }
    }

    pub fn with_image(image: ImageId, query: QueryId) -> Self {
        Self::new(ImageSlot::Image(image), query)
    }

    pub fn text_only(query: QueryId) -> Self {
        Self::new(ImageSlot::Null, query)
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(image={}, query={})", self.image_slot, self.query_id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown context {0}")]
    UnknownContext(Context),
    #[error("unknown response id {0}")]
    UnknownResponse(ResponseId),
    #[error("table shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Domain(String),
    #[error("invalid table: {0}")]
    Invalid(String),
}

/// A gradient over a policy's logits, stored sparsely by context row.
/// Context rows not present carry an exact zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradTable {
    rows: std::collections::BTreeMap<usize, Vec<f64>>,
    vocab_len: usize,
}

impl GradTable {
    pub fn new(vocab_len: usize) -> Self {
        Self { rows: Default::default(), vocab_len }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    fn row_mut(&mut self, ctx_idx: usize) -> &mut Vec<f64> {
        let len = self.vocab_len;
        self.rows.entry(ctx_idx).or_insert_with(|| vec![0.0; len])
    }

    /// Add `coeff * (indicator(resp_idx) - probs)` to the row: the gradient
    /// of `coeff * log softmax(row)[resp_idx]` with respect to the row.
    pub fn add_log_prob_grad(&mut self, ctx_idx: usize, probs: &[f64], resp_idx: usize, coeff: f64) {
        let row = self.row_mut(ctx_idx);
        for (k, g) in row.iter_mut().enumerate() {
            let indicator = if k == resp_idx { 1.0 } else { 0.0 };
            *g += coeff * (indicator - probs[k]);
        }
    }

    pub fn add_entry(&mut self, ctx_idx: usize, resp_idx: usize, value: f64) {
        self.row_mut(ctx_idx)[resp_idx] += value;
    }

    pub fn row(&self, ctx_idx: usize) -> Option<&[f64]> {
        self.rows.get(&ctx_idx).map(Vec::as_slice)
    }

    pub fn entry(&self, ctx_idx: usize, resp_idx: usize) -> f64 {
        self.rows.get(&ctx_idx).map_or(0.0, |row| row[resp_idx])
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(idx, row)| (*idx, row.as_slice()))
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for g in row.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|row| row.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Tabular conditional policy π(y | context) parameterized by raw logits.
#[derive(Clone, Debug)]
pub struct PolicyTable {
    contexts: Vec<Context>,
    vocab: Vec<ResponseId>,
    /// Row-major: logits[ctx_idx * vocab.len() + resp_idx].
    logits: Vec<f64>,
    ctx_index: HashMap<Context, usize>,
    resp_index: HashMap<ResponseId, usize>,
}

impl PartialEq for PolicyTable {
    fn eq(&self, other: &Self) -> bool {
        self.contexts == other.contexts && self.vocab == other.vocab && self.logits == other.logits
    }
}

type TableIndexes = (HashMap<Context, usize>, HashMap<ResponseId, usize>);

fn build_indexes(
    contexts: &[Context],
    vocab: &[ResponseId],
) -> Result<TableIndexes, ModelError> {
    if contexts.is_empty() {
        return Err(ModelError::Invalid("context list is empty".into()));
    }
    if vocab.is_empty() {
        return Err(ModelError::Invalid("vocab is empty".into()));
    }
    let mut ctx_index = HashMap::with_capacity(contexts.len());
    for (i, c) in contexts.iter().enumerate() {
        if ctx_index.insert(*c, i).is_some() {
            return Err(ModelError::Invalid(format!("duplicate context {c}")));
        }
    }
    let mut resp_index = HashMap::with_capacity(vocab.len());
    for (i, y) in vocab.iter().enumerate() {
        if resp_index.insert(*y, i).is_some() {
            return Err(ModelError::Invalid(format!("duplicate response id {y}")));
        }
    }
    Ok((ctx_index, resp_index))
}

impl PolicyTable {
    /// Uniform policy: all logits zero.
    pub fn uniform(contexts: Vec<Context>, vocab: Vec<ResponseId>) -> Result<Self, ModelError> {
        let n = contexts.len() * vocab.len();
        Self::from_logits(contexts, vocab, vec![0.0; n])
    }

    pub fn from_logits(
        contexts: Vec<Context>,
        vocab: Vec<ResponseId>,
        logits: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let (ctx_index, resp_index) = build_indexes(&contexts, &vocab)?;
        if logits.len() != contexts.len() * vocab.len() {
            return Err(ModelError::Invalid(format!(
                "logit table has {} entries, expected {} contexts x {} responses",
                logits.len(),
                contexts.len(),
                vocab.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::Invalid(format!("non-finite logit {bad}")));
        }
        Ok(Self { contexts, vocab, logits, ctx_index, resp_index })
    }

    /// Seeded random policy with logits uniform in [-amplitude, amplitude].
    pub fn random(
        contexts: Vec<Context>,
        vocab: Vec<ResponseId>,
        amplitude: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ModelError> {
        let n = contexts.len() * vocab.len();
        let logits = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * amplitude)
            .collect();
        Self::from_logits(contexts, vocab, logits)
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn vocab(&self) -> &[ResponseId] {
        &self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn context_index(&self, c: &Context) -> Result<usize, ModelError> {
        self.ctx_index.get(c).copied().ok_or(ModelError::UnknownContext(*c))
    }

    pub fn response_index(&self, y: ResponseId) -> Result<usize, ModelError> {
        self.resp_index.get(&y).copied().ok_or(ModelError::UnknownResponse(y))
    }

    pub fn row(&self, ctx_idx: usize) -> &[f64] {
        let v = self.vocab.len();
        &self.logits[ctx_idx * v..(ctx_idx + 1) * v]
    }

    fn row_mut(&mut self, ctx_idx: usize) -> &mut [f64] {
        let v = self.vocab.len();
        &mut self.logits[ctx_idx * v..(ctx_idx + 1) * v]
    }

    /// Exact log π(y | c) = logits[c, y] - logsumexp(logits[c, ·]).
    pub fn log_prob(&self, c: &Context, y: ResponseId) -> Result<f64, ModelError> {
        let ci = self.context_index(c)?;
        let yi = self.response_index(y)?;
        Ok(self.log_prob_at(ci, yi))
    }

    /// Index-addressed log-probability (no lookups; hot path).
    pub fn log_prob_at(&self, ctx_idx: usize, resp_idx: usize) -> f64 {
        let row = self.row(ctx_idx);
        row[resp_idx] - logsumexp(row)
    }

    /// Softmax of a context row.
    pub fn probs_row(&self, ctx_idx: usize) -> Vec<f64> {
        let row = self.row(ctx_idx);
        let lse = logsumexp(row);
        row.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Gradient of log π(y | c) with respect to the logits of row c:
    /// indicator(y) - softmax(c). Rows of every other context are zero.
    pub fn grad_log_prob(&self, c: &Context, y: ResponseId) -> Result<GradTable, ModelError> {
        let ci = self.context_index(c)?;
        let yi = self.response_index(y)?;
        let probs = self.probs_row(ci);
        let mut grad = GradTable::new(self.vocab.len());
        grad.add_log_prob_grad(ci, &probs, yi, 1.0);
        Ok(grad)
    }

    /// A frozen deep copy. Later mutation of either table leaves the other
    /// untouched.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), ModelError> {
        if self.vocab != other.vocab {
            return Err(ModelError::ShapeMismatch("vocabularies differ".into()));
        }
        if self.contexts != other.contexts {
            return Err(ModelError::ShapeMismatch("context lists differ".into()));
        }
        Ok(())
    }

    /// D_KL(self(·|c) ‖ other(·|c)) in nats.
    pub fn kl_divergence(&self, other: &Self, c: &Context) -> Result<f64, ModelError> {
        self.check_same_shape(other)?;
        let ci = self.context_index(c)?;
        let p_log = self.log_probs_row(ci);
        let q_log = other.log_probs_row(ci);
        let mut kl = 0.0;
        for (lp, lq) in p_log.iter().zip(&q_log) {
            kl += lp.exp() * (lp - lq);
        }
        Ok(kl)
    }

    /// Mean KL over all contexts; the trace telemetry aggregate.
    pub fn mean_kl(&self, other: &Self) -> Result<f64, ModelError> {
        self.check_same_shape(other)?;
        let mut total = 0.0;
        for c in &self.contexts {
            total += self.kl_divergence(other, c)?;
        }
        Ok(total / self.contexts.len() as f64)
    }

    /// Total variation distance ½ Σ_y |p(y|c) - q(y|c)|.
    pub fn tv_distance(&self, other: &Self, c: &Context) -> Result<f64, ModelError> {
        self.check_same_shape(other)?;
        let ci = self.context_index(c)?;
        let p = self.probs_row(ci);
        let q = other.probs_row(ci);
        Ok(0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    fn log_probs_row(&self, ctx_idx: usize) -> Vec<f64> {
        let row = self.row(ctx_idx);
        let lse = logsumexp(row);
        row.iter().map(|l| l - lse).collect()
    }

    /// In-place gradient descent step: logits -= learning_rate * grad.
    pub fn gradient_step(&mut self, grad: &GradTable, learning_rate: f64) {
        for (ctx_idx, grow) in grad.iter_rows() {
            let row = self.row_mut(ctx_idx);
            for (l, g) in row.iter_mut().zip(grow) {
                *l -= learning_rate * g;
            }
        }
    }
}

/// Per-(context, response) reward values in β-scaled nats.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    contexts: Vec<Context>,
    vocab: Vec<ResponseId>,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn zeros(contexts: Vec<Context>, vocab: Vec<ResponseId>) -> Result<Self, ModelError> {
        let n = contexts.len() * vocab.len();
        Self::from_values(contexts, vocab, vec![0.0; n])
    }

    pub fn from_values(
        contexts: Vec<Context>,
        vocab: Vec<ResponseId>,
        values: Vec<f64>,
    ) -> Result<Self, ModelError> {
        build_indexes(&contexts, &vocab)?;
        if values.len() != contexts.len() * vocab.len() {
            return Err(ModelError::Invalid(format!(
                "reward table has {} entries, expected {}",
                values.len(),
                contexts.len() * vocab.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::Invalid(format!("non-finite reward {bad}")));
        }
        Ok(Self { contexts, vocab, values })
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn vocab(&self) -> &[ResponseId] {
        &self.vocab
    }

    pub fn value(&self, c: &Context, y: ResponseId) -> Result<f64, ModelError> {
        let ci = self
            .contexts
            .iter()
            .position(|x| x == c)
            .ok_or(ModelError::UnknownContext(*c))?;
        let yi = self
            .vocab
            .iter()
            .position(|x| *x == y)
            .ok_or(ModelError::UnknownResponse(y))?;
        Ok(self.values[ci * self.vocab.len() + yi])
    }

    pub fn set(&mut self, c: &Context, y: ResponseId, value: f64) -> Result<(), ModelError> {
        let ci = self
            .contexts
            .iter()
            .position(|x| x == c)
            .ok_or(ModelError::UnknownContext(*c))?;
        let yi = self
            .vocab
            .iter()
            .position(|x| *x == y)
            .ok_or(ModelError::UnknownResponse(y))?;
        self.values[ci * self.vocab.len() + yi] = value;
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entrywise sum of two reward tables over the same index sets.
    pub fn add(&self, other: &Self) -> Result<Self, ModelError> {
        if self.contexts != other.contexts || self.vocab != other.vocab {
            return Err(ModelError::ShapeMismatch("reward tables disagree".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Self::from_values(self.contexts.clone(), self.vocab.clone(), values)
    }
}

/// The KL-regularized stage optimum: π ∝ base · exp(r / β), realized by
/// adding r/β to the base logits and renormalizing each row.
pub fn closed_form_optimum(
    base: &PolicyTable,
    reward: &RewardTable,
    beta: f64,
) -> Result<PolicyTable, ModelError> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(ModelError::Domain(format!("beta must be positive, got {beta}")));
    }
    if base.contexts() != reward.contexts() || base.vocab() != reward.vocab() {
        return Err(ModelError::ShapeMismatch(
            "policy and reward tables disagree".into(),
        ));
    }
    let v = base.vocab().len();
    let mut logits = Vec::with_capacity(base.logits().len());
    for ci in 0..base.contexts().len() {
        let mut row: Vec<f64> = base
            .row(ci)
            .iter()
            .zip(&reward.values()[ci * v..(ci + 1) * v])
            .map(|(l, r)| l + r / beta)
            .collect();
        let lse = logsumexp(&row);
        for l in row.iter_mut() {
            *l -= lse;
        }
        logits.extend_from_slice(&row);
    }
    PolicyTable::from_logits(base.contexts().to_vec(), base.vocab().to_vec(), logits)
}

/// β[log π(y1|c)/ref(y1|c) - log π(y2|c)/ref(y2|c)]. For a policy produced by
/// [`closed_form_optimum`] this equals the raw reward difference: the
/// per-context normalizer cancels.
pub fn policy_reward_gap(
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    c: &Context,
    y1: ResponseId,
    y2: ResponseId,
) -> Result<f64, ModelError> {
    pi.check_same_shape(reference)?;
    let lr1 = pi.log_prob(c, y1)? - reference.log_prob(c, y1)?;
    let lr2 = pi.log_prob(c, y2)? - reference.log_prob(c, y2)?;
    Ok(beta * (lr1 - lr2))
}

// ---------------------------------------------------------------------------
// Serialization: versioned JSON, bit-exact logits.
// ---------------------------------------------------------------------------

pub const POLICY_FORMAT: &str = "scpo-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    float_mode: FloatMode,
    vocab: Vec<u32>,
    contexts: Vec<Context>,
    /// Row-major, one encoded f64 per (context, response) cell.
    logits: Vec<String>,
}

#[derive(Debug, Error)]
pub enum PolicyIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid policy json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported policy file: {0}")]
    BadFormat(String),
    #[error("bad float field: {0}")]
    Float(#[from] crate::floatfmt::FloatParseError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PolicyTable {
    pub fn to_json(&self, mode: FloatMode) -> String {
        let file = PolicyFile {
            format: POLICY_FORMAT.to_string(),
            version: POLICY_VERSION,
            float_mode: mode,
            vocab: self.vocab.iter().map(|y| y.0).collect(),
            contexts: self.contexts.clone(),
            logits: self.logits.iter().map(|l| encode_f64(*l, mode)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("policy serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyIoError> {
        let file: PolicyFile = serde_json::from_str(text)?;
        if file.format != POLICY_FORMAT {
            return Err(PolicyIoError::BadFormat(format!(
                "format {:?}, expected {POLICY_FORMAT:?}",
                file.format
            )));
        }
        if file.version != POLICY_VERSION {
            return Err(PolicyIoError::BadFormat(format!(
                "version {}, expected {POLICY_VERSION}",
                file.version
            )));
        }
        let logits = file
            .logits
            .iter()
            .map(|s| decode_f64(s, file.float_mode))
            .collect::<Result<Vec<_>, _>>()?;
        let vocab = file.vocab.into_iter().map(ResponseId).collect();
        Ok(Self::from_logits(file.contexts, vocab, logits)?)
    }

    pub fn write_to(&self, path: &Path, mode: FloatMode) -> Result<(), PolicyIoError> {
        std::fs::write(path, self.to_json(mode)).map_err(|source| PolicyIoError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_from(path: &Path) -> Result<Self, PolicyIoError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn two_contexts() -> Vec<Context> {
        vec![
            Context::with_image(ImageId(0), QueryId(0)),
            Context::text_only(QueryId(0)),
        ]
    }

    fn vocab4() -> Vec<ResponseId> {
        (0..4).map(ResponseId).collect()
    }

    fn ctx0() -> Context {
        Context::with_image(ImageId(0), QueryId(0))
    }

    #[test]
    fn uniform_row_log_prob_is_ln_quarter() {
        let p = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        for y in 0..4 {
            assert_abs_diff_eq!(
                p.log_prob(&ctx0(), ResponseId(y)).unwrap(),
                (0.25f64).ln(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn log_prob_shift_invariance() {
        let shifted =
            PolicyTable::from_logits(two_contexts(), vocab4(), vec![7.3; 8]).unwrap();
        assert_abs_diff_eq!(
            shifted.log_prob(&ctx0(), ResponseId(2)).unwrap(),
            (0.25f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_hot_favoring_row() {
        let mut logits = vec![0.0; 8];
        logits[0] = 10.0;
        let p = PolicyTable::from_logits(two_contexts(), vocab4(), logits).unwrap();
        let lp = p.log_prob(&ctx0(), ResponseId(0)).unwrap();
        // 10 - ln(e^10 + 3) = -ln(1 + 3e^-10)
        let expected = -(1.0 + 3.0 * (-10.0f64).exp()).ln();
        assert_abs_diff_eq!(lp, expected, epsilon = 1e-15);
        assert!(lp > -1.37e-4 && lp < -1.35e-4);
    }

    #[test]
    fn lookup_errors_name_the_missing_key() {
        let p = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        let missing = Context::with_image(ImageId(9), QueryId(9));
        assert_eq!(
            p.log_prob(&missing, ResponseId(0)).unwrap_err(),
            ModelError::UnknownContext(missing)
        );
        assert_eq!(
            p.log_prob(&ctx0(), ResponseId(99)).unwrap_err(),
            ModelError::UnknownResponse(ResponseId(99))
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream(11, "model/test", 0);
        for _ in 0..50 {
            let p = PolicyTable::random(two_contexts(), vocab4(), 5.0, &mut rng).unwrap();
            for ci in 0..p.contexts().len() {
                let total: f64 = p.probs_row(ci).iter().sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn grad_log_prob_uniform_indicator() {
        let p = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        let g = p.grad_log_prob(&ctx0(), ResponseId(0)).unwrap();
        let row = g.row(0).unwrap();
        assert_abs_diff_eq!(row[0], 0.75, epsilon = 1e-15);
        for value in &row[1..4] {
            assert_abs_diff_eq!(*value, -0.25, epsilon = 1e-15);
        }
        // Other context rows are absent, i.e. exactly zero.
        assert!(g.row(1).is_none());
    }

    #[test]
    fn grad_log_prob_rows_sum_to_zero() {
        let mut rng = stream(12, "model/test", 1);
        let p = PolicyTable::random(two_contexts(), vocab4(), 3.0, &mut rng).unwrap();
        let g = p.grad_log_prob(&ctx0(), ResponseId(2)).unwrap();
        let total: f64 = g.row(0).unwrap().iter().sum();
        assert_abs_diff_eq!(total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let h = 1e-5;
        for instance in 0..100 {
            let mut rng = stream(13, "model/fd", instance);
            let p = PolicyTable::random(two_contexts(), vocab4(), 2.0, &mut rng).unwrap();
            let c = ctx0();
            let y = ResponseId(instance as u32 % 4);
            let analytic = p.grad_log_prob(&c, y).unwrap();
            let ci = p.context_index(&c).unwrap();
            for k in 0..4 {
                let mut plus = p.clone();
                plus.row_mut(ci)[k] += h;
                let mut minus = p.clone();
                minus.row_mut(ci)[k] -= h;
                let fd =
                    (plus.log_prob(&c, y).unwrap() - minus.log_prob(&c, y).unwrap()) / (2.0 * h);
                let a = analytic.entry(ci, k);
                let denom = a.abs().max(fd.abs());
                if denom > 1e-12 {
                    assert!(
                        ((a - fd) / denom).abs() <= 1e-6,
                        "instance {instance} logit {k}: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn snapshot_is_isolated_copy() {
        let mut p = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        let snap = p.snapshot();
        assert_eq!(p, snap);
        for c in p.contexts().to_vec() {
            assert_eq!(p.kl_divergence(&snap, &c).unwrap(), 0.0);
        }
        p.row_mut(0)[0] = 3.0;
        assert_ne!(p, snap);
        assert_eq!(snap.row(0)[0], 0.0);
    }

    #[test]
    fn kl_of_identical_tables_is_zero_exactly() {
        let mut rng = stream(14, "model/test", 2);
        let p = PolicyTable::random(two_contexts(), vocab4(), 4.0, &mut rng).unwrap();
        for c in p.contexts() {
            assert_eq!(p.kl_divergence(&p, c).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_binary_example_matches_direct_summation() {
        let contexts = vec![ctx0()];
        let vocab = vec![ResponseId(0), ResponseId(1)];
        let p = PolicyTable::uniform(contexts.clone(), vocab.clone()).unwrap();
        // logits (1, 0) give the softmax (σ(1), σ(-1)) = (0.731059, 0.268941).
        let q = PolicyTable::from_logits(contexts, vocab, vec![1.0, 0.0]).unwrap();
        let q0 = 1.0 / (1.0 + (-1.0f64).exp());
        let q1 = 1.0 - q0;
        let expected = 0.5 * (0.5f64 / q0).ln() + 0.5 * (0.5f64 / q1).ln();
        assert_abs_diff_eq!(p.kl_divergence(&q, &ctx0()).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        for i in 0..1000 {
            let mut rng = stream(15, "model/kl", i);
            let contexts = vec![ctx0()];
            let p = PolicyTable::random(contexts.clone(), vocab4(), 6.0, &mut rng).unwrap();
            let q = PolicyTable::random(contexts, vocab4(), 6.0, &mut rng).unwrap();
            let kl = p.kl_divergence(&q, &ctx0()).unwrap();
            assert!(kl >= 0.0, "seed {i}: negative KL {kl}");
        }
    }

    #[test]
    fn kl_shape_mismatch_is_an_error() {
        let p = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        let q =
            PolicyTable::uniform(two_contexts(), (0..3).map(ResponseId).collect()).unwrap();
        assert!(matches!(
            p.kl_divergence(&q, &ctx0()),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn closed_form_optimum_zero_reward_is_identity() {
        let mut rng = stream(16, "model/cfo", 0);
        let base = PolicyTable::random(two_contexts(), vocab4(), 3.0, &mut rng).unwrap();
        let r = RewardTable::zeros(two_contexts(), vocab4()).unwrap();
        let opt = closed_form_optimum(&base, &r, 0.1).unwrap();
        for c in base.contexts() {
            assert!(base.tv_distance(&opt, c).unwrap() < 1e-12);
        }
    }

    #[test]
    fn closed_form_optimum_matches_brute_force_rows() {
        let mut rng = stream(17, "model/cfo", 1);
        let base = PolicyTable::random(two_contexts(), vocab4(), 2.0, &mut rng).unwrap();
        let values: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let r = RewardTable::from_values(two_contexts(), vocab4(), values.clone()).unwrap();
        let beta = 0.25;
        let opt = closed_form_optimum(&base, &r, beta).unwrap();
        for ci in 0..2 {
            // Brute force: p_i ∝ base_prob_i * exp(r_i / beta), normalized per row.
            let base_probs = base.probs_row(ci);
            let weights: Vec<f64> = base_probs
                .iter()
                .zip(&values[ci * 4..(ci + 1) * 4])
                .map(|(p, r)| p * (r / beta).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let got = opt.probs_row(ci);
            for k in 0..4 {
                assert_abs_diff_eq!(got[k], weights[k] / total, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_optimum_composes_additively() {
        let mut rng = stream(18, "model/cfo", 2);
        let base = PolicyTable::random(two_contexts(), vocab4(), 2.0, &mut rng).unwrap();
        let v1: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let v2: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let r1 = RewardTable::from_values(two_contexts(), vocab4(), v1).unwrap();
        let r2 = RewardTable::from_values(two_contexts(), vocab4(), v2).unwrap();
        let beta = 0.1;
        let sequential =
            closed_form_optimum(&closed_form_optimum(&base, &r1, beta).unwrap(), &r2, beta)
                .unwrap();
        let direct = closed_form_optimum(&base, &r1.add(&r2).unwrap(), beta).unwrap();
        for c in base.contexts() {
            assert!(sequential.tv_distance(&direct, c).unwrap() < 1e-12);
        }
    }

    #[test]
    fn closed_form_optimum_rejects_nonpositive_beta() {
        let base = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        let r = RewardTable::zeros(two_contexts(), vocab4()).unwrap();
        assert!(matches!(
            closed_form_optimum(&base, &r, 0.0),
            Err(ModelError::Domain(_))
        ));
        assert!(matches!(
            closed_form_optimum(&base, &r, -1.0),
            Err(ModelError::Domain(_))
        ));
    }

    #[test]
    fn reward_gap_identities() {
        let mut rng = stream(19, "model/gap", 0);
        let reference = PolicyTable::random(two_contexts(), vocab4(), 2.0, &mut rng).unwrap();
        // pi = ref: gap is zero everywhere.
        for y1 in 0..4 {
            for y2 in 0..4 {
                let gap = policy_reward_gap(
                    &reference,
                    &reference,
                    0.1,
                    &ctx0(),
                    ResponseId(y1),
                    ResponseId(y2),
                )
                .unwrap();
                assert_eq!(gap, 0.0);
            }
        }
        // pi from a known reward table reproduces reward differences.
        let values: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 3.0).collect();
        let r = RewardTable::from_values(two_contexts(), vocab4(), values).unwrap();
        let beta = 0.1;
        let pi = closed_form_optimum(&reference, &r, beta).unwrap();
        for c in reference.contexts() {
            for y1 in 0..4u32 {
                for y2 in 0..4u32 {
                    let gap = policy_reward_gap(
                        &pi,
                        &reference,
                        beta,
                        c,
                        ResponseId(y1),
                        ResponseId(y2),
                    )
                    .unwrap();
                    let expected =
                        r.value(c, ResponseId(y1)).unwrap() - r.value(c, ResponseId(y2)).unwrap();
                    assert_abs_diff_eq!(gap, expected, epsilon = 1e-10);
                    // Antisymmetry.
                    let reversed = policy_reward_gap(
                        &pi,
                        &reference,
                        beta,
                        c,
                        ResponseId(y2),
                        ResponseId(y1),
                    )
                    .unwrap();
                    assert_abs_diff_eq!(gap, -reversed, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn policy_json_round_trip_bit_exact() {
        let mut rng = stream(20, "model/io", 0);
        let p = PolicyTable::random(two_contexts(), vocab4(), 5.0, &mut rng).unwrap();
        for mode in [FloatMode::Hex, FloatMode::Dec] {
            let text = p.to_json(mode);
            let back = PolicyTable::from_json(&text).unwrap();
            assert_eq!(p, back);
            let rebits: Vec<u64> = back.logits().iter().map(|l| l.to_bits()).collect();
            let bits: Vec<u64> = p.logits().iter().map(|l| l.to_bits()).collect();
            assert_eq!(bits, rebits);
        }
    }

    #[test]
    fn policy_json_rejects_wrong_format() {
        let p = PolicyTable::uniform(two_contexts(), vocab4()).unwrap();
        let text = p.to_json(FloatMode::Hex).replace("scpo-policy", "other");
        assert!(matches!(
            PolicyTable::from_json(&text),
            Err(PolicyIoError::BadFormat(_))
        ));
    }
}
