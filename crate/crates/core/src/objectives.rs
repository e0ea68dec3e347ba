//! The preference loss family and its analytic gradients.
//!
//! Every term is a `-log σ(coefficient · margin)` over reference-relative
//! log-ratios, evaluated through softplus so that margins in the hundreds
//! stay finite:
//!
//! - text loss: fixed chosen image, contrasted responses,
//! - image loss: fixed chosen response, contrasted images,
//! - match / contradict losses: a response against its own image versus the
//!   image-free context, applied symmetrically to the chosen and the
//!   rejected image-text pairing,
//! - the combined objective: (text + image) + λ · (four symmetry terms).
//!
//! Gradients flow only into the live policy; the reference table is constant.

use serde::{Deserialize, Serialize};

use crate::model::{
    Context, GradTable, ImageId, ModelError, PairId, PolicyTable, QueryId, ResponseId,
};
use crate::numeric::{neg_log_sigmoid, sigmoid, Neumaier};

/// One preference observation: a query, the chosen and rejected images and
/// the chosen and rejected responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: PairId,
    pub query_id: QueryId,
    pub chosen_image: ImageId,
    pub rejected_image: ImageId,
    pub chosen_response: ResponseId,
    pub rejected_response: ResponseId,
}

impl PreferencePair {
    /// (chosen image, query)
    pub fn chosen_context(&self) -> Context {
        Context::with_image(self.chosen_image, self.query_id)
    }

    /// (rejected image, query)
    pub fn rejected_context(&self) -> Context {
        Context::with_image(self.rejected_image, self.query_id)
    }

    /// (null image, query): conditioning on the query alone.
    pub fn text_only_context(&self) -> Context {
        Context::text_only(self.query_id)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.chosen_image == self.rejected_image {
            return Err(format!(
                "pair {}: chosen and rejected image are both {}",
                self.pair_id, self.chosen_image
            ));
        }
        if self.chosen_response == self.rejected_response {
            return Err(format!(
                "pair {}: chosen and rejected response are both {}",
                self.pair_id, self.chosen_response
            ));
        }
        Ok(())
    }
}

/// Loss coefficients and descent settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Ranking coefficient for the text and image losses.
    pub beta: f64,
    /// Match-term coefficient.
    pub beta1: f64,
    /// Contradict-term coefficient.
    pub beta2: f64,
    /// Weight of the symmetry component in the total loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_stage: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            beta1: 0.1,
            beta2: 0.1,
            lambda: 0.2,
            learning_rate: 1e-2,
            batch_size: 32,
            epochs_per_stage: 1,
        }
    }
}

impl Hyperparams {
    /// Positivity checks. The learning rate may be zero (a no-op descent is
    /// well defined and useful for diagnostics).
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.epochs_per_stage == 0 {
            return Err("epochs_per_stage must be positive".into());
        }
        Ok(())
    }
}

/// All loss components of one pair, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_text: f64,
    pub l_image: f64,
    pub l_cco: f64,
    pub l_match_w: f64,
    pub l_contradict_l: f64,
    pub l_match_l: f64,
    pub l_contradict_w: f64,
    pub l_cso: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn zeros() -> Self {
        Self {
            l_text: 0.0,
            l_image: 0.0,
            l_cco: 0.0,
            l_match_w: 0.0,
            l_contradict_l: 0.0,
            l_match_l: 0.0,
            l_contradict_w: 0.0,
            l_cso: 0.0,
            l_total: 0.0,
        }
    }

    pub fn components(&self) -> [f64; 9] {
        [
            self.l_text,
            self.l_image,
            self.l_cco,
            self.l_match_w,
            self.l_contradict_l,
            self.l_match_l,
            self.l_contradict_w,
            self.l_cso,
            self.l_total,
        ]
    }
}

/// Probability that the first item is preferred under a logistic pairwise
/// comparison of rewards: σ(r_w - r_l).
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

fn log_ratio(
    pi: &PolicyTable,
    reference: &PolicyTable,
    c: &Context,
    y: ResponseId,
) -> Result<f64, ModelError> {
    Ok(pi.log_prob(c, y)? - reference.log_prob(c, y)?)
}

/// Reference-relative preference margin for (y_w over y_l) in context c.
pub fn margin(
    pi: &PolicyTable,
    reference: &PolicyTable,
    c: &Context,
    y_w: ResponseId,
    y_l: ResponseId,
) -> Result<f64, ModelError> {
    Ok(log_ratio(pi, reference, c, y_w)? - log_ratio(pi, reference, c, y_l)?)
}

/// ∂(-log σ(βM))/∂M = -β σ(-βM). Tends to 0⁻ as M → +∞ (saturation) and to
/// -β as M → -∞ (no vanishing).
pub fn margin_grad_factor(m: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * m)
}

/// Response-contrast ranking loss -log σ(β M) in context c.
pub fn dpo_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    c: &Context,
    y_w: ResponseId,
    y_l: ResponseId,
    beta: f64,
) -> Result<f64, ModelError> {
    Ok(neg_log_sigmoid(beta * margin(pi, reference, c, y_w, y_l)?))
}

/// Margin across two contexts for a shared response.
fn cross_context_margin(
    pi: &PolicyTable,
    reference: &PolicyTable,
    c_pos: &Context,
    c_neg: &Context,
    y: ResponseId,
) -> Result<f64, ModelError> {
    Ok(log_ratio(pi, reference, c_pos, y)? - log_ratio(pi, reference, c_neg, y)?)
}

/// Chosen response over rejected response, conditioned on the chosen image.
pub fn text_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, ModelError> {
    dpo_loss(
        pi,
        reference,
        &pair.chosen_context(),
        pair.chosen_response,
        pair.rejected_response,
        beta,
    )
}

/// Chosen image over rejected image, for the chosen response.
pub fn image_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, ModelError> {
    let m = cross_context_margin(
        pi,
        reference,
        &pair.chosen_context(),
        &pair.rejected_context(),
        pair.chosen_response,
    )?;
    Ok(neg_log_sigmoid(beta * m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcoLoss {
    pub text: f64,
    pub image: f64,
    pub total: f64,
}

/// Complementary component: text loss + image loss.
pub fn cco_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    beta: f64,
) -> Result<CcoLoss, ModelError> {
    let text = text_loss(pi, reference, pair, beta)?;
    let image = image_loss(pi, reference, pair, beta)?;
    Ok(CcoLoss { text, image, total: text + image })
}

/// Prefer generating y on its matching image over generating it from the
/// query alone.
pub fn match_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    image: ImageId,
    y: ResponseId,
    query: QueryId,
    beta1: f64,
) -> Result<f64, ModelError> {
    let m = cross_context_margin(
        pi,
        reference,
        &Context::with_image(image, query),
        &Context::text_only(query),
        y,
    )?;
    Ok(neg_log_sigmoid(beta1 * m))
}

/// Penalize associating y with a mismatched image: the margin of
/// [`match_loss`] with the sign reversed and its own coefficient.
pub fn contradict_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    image: ImageId,
    y: ResponseId,
    query: QueryId,
    beta2: f64,
) -> Result<f64, ModelError> {
    let m = cross_context_margin(
        pi,
        reference,
        &Context::text_only(query),
        &Context::with_image(image, query),
        y,
    )?;
    Ok(neg_log_sigmoid(beta2 * m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsoLoss {
    /// match(chosen image, chosen response)
    pub match_w: f64,
    /// contradict(rejected image, chosen response)
    pub contradict_l: f64,
    /// match(rejected image, rejected response)
    pub match_l: f64,
    /// contradict(chosen image, rejected response)
    pub contradict_w: f64,
    pub total: f64,
}

/// Symmetry component: both the chosen and the rejected image-text pairings
/// are matched against their own image and contradicted against the other.
pub fn cso_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    beta1: f64,
    beta2: f64,
) -> Result<CsoLoss, ModelError> {
    let q = pair.query_id;
    let match_w = match_loss(pi, reference, pair.chosen_image, pair.chosen_response, q, beta1)?;
    let contradict_l =
        contradict_loss(pi, reference, pair.rejected_image, pair.chosen_response, q, beta2)?;
    let match_l =
        match_loss(pi, reference, pair.rejected_image, pair.rejected_response, q, beta1)?;
    let contradict_w =
        contradict_loss(pi, reference, pair.chosen_image, pair.rejected_response, q, beta2)?;
    let total = ((match_w + contradict_l) + match_l) + contradict_w;
    Ok(CsoLoss { match_w, contradict_l, match_l, contradict_w, total })
}

/// Full per-pair objective: complementary + λ · symmetry.
pub fn scpo_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    hp: &Hyperparams,
) -> Result<LossBreakdown, ModelError> {
    let cco = cco_loss(pi, reference, pair, hp.beta)?;
    let cso = cso_loss(pi, reference, pair, hp.beta1, hp.beta2)?;
    Ok(LossBreakdown {
        l_text: cco.text,
        l_image: cco.image,
        l_cco: cco.total,
        l_match_w: cso.match_w,
        l_contradict_l: cso.contradict_l,
        l_match_l: cso.match_l,
        l_contradict_w: cso.contradict_w,
        l_cso: cso.total,
        l_total: cco.total + hp.lambda * cso.total,
    })
}

/// Exact gradient of the total per-pair loss with respect to the policy
/// logits. Only the three context rows touched by the pair — (chosen image,
/// query), (rejected image, query), (null, query) — appear in the result;
/// all other rows carry exactly zero gradient.
pub fn scpo_grad(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    hp: &Hyperparams,
) -> Result<GradTable, ModelError> {
    let cw = pair.chosen_context();
    let cl = pair.rejected_context();
    let c0 = pair.text_only_context();
    let iw = pi.context_index(&cw)?;
    let il = pi.context_index(&cl)?;
    let i0 = pi.context_index(&c0)?;
    let yw = pi.response_index(pair.chosen_response)?;
    let yl = pi.response_index(pair.rejected_response)?;

    let p_w = pi.probs_row(iw);
    let p_l = pi.probs_row(il);
    let p_0 = pi.probs_row(i0);

    let mut grad = GradTable::new(pi.vocab().len());

    // Each term is -log σ(b·M) with M a ± sum of log π(y|c) entries (the
    // reference terms are constants), so dL/dlogits = factor · Σ ± ∇log π.
    let mut add_term = |m: f64,
                        coeff: f64,
                        weight: f64,
                        pos: (usize, &[f64], usize),
                        neg: (usize, &[f64], usize)| {
        let factor = weight * margin_grad_factor(m, coeff);
        grad.add_log_prob_grad(pos.0, pos.1, pos.2, factor);
        grad.add_log_prob_grad(neg.0, neg.1, neg.2, -factor);
    };

    // Text: M = log π(y_w|c_w) - log π(y_l|c_w) - const.
    let m_text = margin(pi, reference, &cw, pair.chosen_response, pair.rejected_response)?;
    add_term(m_text, hp.beta, 1.0, (iw, &p_w, yw), (iw, &p_w, yl));

    // Image: M = log π(y_w|c_w) - log π(y_w|c_l) - const.
    let m_image = cross_context_margin(pi, reference, &cw, &cl, pair.chosen_response)?;
    add_term(m_image, hp.beta, 1.0, (iw, &p_w, yw), (il, &p_l, yw));

    // Symmetry terms, each weighted by λ.
    let m_match_w = cross_context_margin(pi, reference, &cw, &c0, pair.chosen_response)?;
    add_term(m_match_w, hp.beta1, hp.lambda, (iw, &p_w, yw), (i0, &p_0, yw));

    let m_contra_l = cross_context_margin(pi, reference, &c0, &cl, pair.chosen_response)?;
    add_term(m_contra_l, hp.beta2, hp.lambda, (i0, &p_0, yw), (il, &p_l, yw));

    let m_match_l = cross_context_margin(pi, reference, &cl, &c0, pair.rejected_response)?;
    add_term(m_match_l, hp.beta1, hp.lambda, (il, &p_l, yl), (i0, &p_0, yl));

    let m_contra_w = cross_context_margin(pi, reference, &c0, &cw, pair.rejected_response)?;
    add_term(m_contra_w, hp.beta2, hp.lambda, (i0, &p_0, yl), (iw, &p_w, yl));

    Ok(grad)
}

/// Arithmetic mean of per-pair losses, accumulated in dataset order with
/// compensated summation.
pub fn batch_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pairs: &[PreferencePair],
    hp: &Hyperparams,
) -> Result<LossBreakdown, ModelError> {
    mean_breakdown(pairs.iter().map(|p| scpo_loss(pi, reference, p, hp)))
}

/// Mean of a stream of loss breakdowns, componentwise, compensated.
pub fn mean_breakdown(
    items: impl Iterator<Item = Result<LossBreakdown, ModelError>>,
) -> Result<LossBreakdown, ModelError> {
    let mut acc = [Neumaier::new(); 9];
    let mut n = 0usize;
    for item in items {
        let b = item?;
        for (slot, v) in acc.iter_mut().zip(b.components()) {
            slot.add(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::Domain("mean over an empty batch".into()));
    }
    let scale = 1.0 / n as f64;
    let t = |i: usize| acc[i].total() * scale;
    Ok(LossBreakdown {
        l_text: t(0),
        l_image: t(1),
        l_cco: t(2),
        l_match_w: t(3),
        l_contradict_l: t(4),
        l_match_l: t(5),
        l_contradict_w: t(6),
        l_cso: t(7),
        l_total: t(8),
    })
}

/// Per-entry compensated accumulator for averaging sparse gradient tables in
/// a fixed order.
pub struct GradAccumulator {
    rows: std::collections::BTreeMap<usize, Vec<Neumaier>>,
    vocab_len: usize,
    count: usize,
}

impl GradAccumulator {
    pub fn new(vocab_len: usize) -> Self {
        Self { rows: Default::default(), vocab_len, count: 0 }
    }

    pub fn add(&mut self, grad: &GradTable) {
        for (ctx_idx, row) in grad.iter_rows() {
            let slot = self
                .rows
                .entry(ctx_idx)
                .or_insert_with(|| vec![Neumaier::new(); self.vocab_len]);
            for (acc, g) in slot.iter_mut().zip(row) {
                acc.add(*g);
            }
        }
        self.count += 1;
    }

    /// Mean gradient over everything added so far.
    pub fn mean(&self) -> Result<GradTable, ModelError> {
        if self.count == 0 {
            return Err(ModelError::Domain("mean over an empty gradient batch".into()));
        }
        let scale = 1.0 / self.count as f64;
        let mut out = GradTable::new(self.vocab_len);
        for (ctx_idx, row) in &self.rows {
            for (k, acc) in row.iter().enumerate() {
                out.add_entry(*ctx_idx, k, acc.total() * scale);
            }
        }
        Ok(out)
    }
}

/// Mean per-pair gradient in dataset order.
pub fn batch_grad(
    pi: &PolicyTable,
    reference: &PolicyTable,
    pairs: &[PreferencePair],
    hp: &Hyperparams,
) -> Result<GradTable, ModelError> {
    let mut acc = GradAccumulator::new(pi.vocab().len());
    for pair in pairs {
        acc.add(&scpo_grad(pi, reference, pair, hp)?);
    }
    acc.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageSlot;
    use crate::seeding::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn pair() -> PreferencePair {
        PreferencePair {
            pair_id: PairId(0),
            query_id: QueryId(0),
            chosen_image: ImageId(0),
            rejected_image: ImageId(1),
            chosen_response: ResponseId(0),
            rejected_response: ResponseId(1),
        }
    }

    fn pair_contexts() -> Vec<Context> {
        vec![
            Context::with_image(ImageId(0), QueryId(0)),
            Context::with_image(ImageId(1), QueryId(0)),
            Context::text_only(QueryId(0)),
        ]
    }

    fn vocab() -> Vec<ResponseId> {
        (0..4).map(ResponseId).collect()
    }

    fn random_policy(seed_index: u64, amplitude: f64) -> PolicyTable {
        let mut rng = stream(31, "objectives/test", seed_index);
        PolicyTable::random(pair_contexts(), vocab(), amplitude, &mut rng).unwrap()
    }

    #[test]
    fn bt_probability_examples() {
        assert_eq!(bt_probability(3.7, 3.7), 0.5);
        assert_abs_diff_eq!(bt_probability(1.0, 0.0), 0.7310585786300049, epsilon = 1e-12);
        let mut rng = stream(32, "objectives/bt", 0);
        for _ in 0..100 {
            let a: f64 = rng.random::<f64>() * 10.0 - 5.0;
            let b: f64 = rng.random::<f64>() * 10.0 - 5.0;
            assert_abs_diff_eq!(bt_probability(a, b) + bt_probability(b, a), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn dpo_loss_at_reference_is_ln2() {
        let p = random_policy(0, 3.0);
        let loss =
            dpo_loss(&p, &p, &pair().chosen_context(), ResponseId(0), ResponseId(1), 0.1).unwrap();
        assert_abs_diff_eq!(loss, LN2, epsilon = 1e-15);
    }

    #[test]
    fn dpo_loss_saturation_asymptotes() {
        // Build tables with a huge margin by hand: logits differ by ±2500 so
        // the margin reaches ±500 at one pair of responses.
        let contexts = vec![Context::with_image(ImageId(0), QueryId(0))];
        let hot = PolicyTable::from_logits(
            contexts.clone(),
            vocab(),
            vec![250.0, -250.0, 0.0, 0.0],
        )
        .unwrap();
        let reference = PolicyTable::uniform(contexts.clone(), vocab()).unwrap();
        let c = contexts[0];
        let m = margin(&hot, &reference, &c, ResponseId(0), ResponseId(1)).unwrap();
        assert_abs_diff_eq!(m, 500.0, epsilon = 1e-9);
        let beta = 0.1;
        let positive = dpo_loss(&hot, &reference, &c, ResponseId(0), ResponseId(1), beta).unwrap();
        assert!(positive > 0.0 && positive < 1e-20, "got {positive}");
        let negative = dpo_loss(&hot, &reference, &c, ResponseId(1), ResponseId(0), beta).unwrap();
        assert_abs_diff_eq!(negative, beta * 500.0, epsilon = 1e-9);
    }

    #[test]
    fn dpo_loss_matches_naive_evaluation_on_moderate_margins() {
        for i in 0..200 {
            let p = random_policy(100 + i, 1.5);
            let r = random_policy(300 + i, 1.5);
            let c = pair().chosen_context();
            let m = margin(&p, &r, &c, ResponseId(0), ResponseId(1)).unwrap();
            let loss = dpo_loss(&p, &r, &c, ResponseId(0), ResponseId(1), 0.1).unwrap();
            let naive = -(1.0 / (1.0 + (-(0.1 * m)).exp())).ln();
            assert_abs_diff_eq!(loss, naive, epsilon = 1e-12);
        }
    }

    #[test]
    fn text_loss_is_dpo_under_substitution() {
        for i in 0..100 {
            let p = random_policy(500 + i, 2.0);
            let r = random_policy(700 + i, 2.0);
            let pr = pair();
            let direct = text_loss(&p, &r, &pr, 0.1).unwrap();
            let substituted = dpo_loss(
                &p,
                &r,
                &pr.chosen_context(),
                pr.chosen_response,
                pr.rejected_response,
                0.1,
            )
            .unwrap();
            assert_eq!(direct, substituted);
        }
    }

    #[test]
    fn text_loss_decreases_when_chosen_logit_rises() {
        let p = random_policy(1, 2.0);
        let r = p.clone();
        let pr = pair();
        let base = text_loss(&p, &r, &pr, 0.1).unwrap();
        let ci = p.context_index(&pr.chosen_context()).unwrap();
        let yi = p.response_index(pr.chosen_response).unwrap();
        let mut logits = p.logits().to_vec();
        logits[ci * 4 + yi] += 0.5;
        let bumped = PolicyTable::from_logits(pair_contexts(), vocab(), logits).unwrap();
        assert!(text_loss(&bumped, &r, &pr, 0.1).unwrap() < base);
    }

    #[test]
    fn image_loss_reflection_bound() {
        // Swapping the two images negates the margin; softplus convexity gives
        // l(M) + l(-M) ≥ 2 ln 2 with equality iff M = 0.
        let p = random_policy(2, 2.0);
        let r = random_policy(3, 2.0);
        let pr = pair();
        let swapped = PreferencePair {
            chosen_image: pr.rejected_image,
            rejected_image: pr.chosen_image,
            ..pr
        };
        let a = image_loss(&p, &r, &pr, 0.1).unwrap();
        let b = image_loss(&p, &r, &swapped, 0.1).unwrap();
        assert!(a + b >= 2.0 * LN2 - 1e-12);
        // Equality at zero margin.
        let eq = image_loss(&p, &p, &pr, 0.1).unwrap();
        assert_abs_diff_eq!(2.0 * eq, 2.0 * LN2, epsilon = 1e-12);
    }

    #[test]
    fn image_loss_is_cross_context_dpo() {
        let p = random_policy(4, 2.0);
        let r = random_policy(5, 2.0);
        let pr = pair();
        let direct = image_loss(&p, &r, &pr, 0.1).unwrap();
        // Hand-substituted: same response, image-indexed contexts.
        let m = (p.log_prob(&pr.chosen_context(), pr.chosen_response).unwrap()
            - r.log_prob(&pr.chosen_context(), pr.chosen_response).unwrap())
            - (p.log_prob(&pr.rejected_context(), pr.chosen_response).unwrap()
                - r.log_prob(&pr.rejected_context(), pr.chosen_response).unwrap());
        assert_eq!(direct, neg_log_sigmoid(0.1 * m));
    }

    #[test]
    fn cco_loss_componentwise() {
        let p = random_policy(6, 2.0);
        let r = random_policy(7, 2.0);
        let pr = pair();
        let cco = cco_loss(&p, &r, &pr, 0.1).unwrap();
        assert_eq!(cco.text, text_loss(&p, &r, &pr, 0.1).unwrap());
        assert_eq!(cco.image, image_loss(&p, &r, &pr, 0.1).unwrap());
        assert_eq!(cco.total, cco.text + cco.image);
        let at_ref = cco_loss(&p, &p, &pr, 0.1).unwrap();
        assert_abs_diff_eq!(at_ref.text, LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(at_ref.image, LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(at_ref.total, 2.0 * LN2, epsilon = 1e-15);
    }

    #[test]
    fn cco_loss_nonnegative_sweep() {
        for i in 0..1000 {
            let p = random_policy(2000 + i, 3.0);
            let r = random_policy(4000 + i, 3.0);
            let cco = cco_loss(&p, &r, &pair(), 0.1).unwrap();
            assert!(cco.text > 0.0 && cco.image > 0.0 && cco.total > 0.0);
        }
    }

    #[test]
    fn match_contradict_pair_bound() {
        let p = random_policy(8, 2.0);
        let r = random_policy(9, 2.0);
        let q = QueryId(0);
        let beta = 0.1;
        let m = match_loss(&p, &r, ImageId(0), ResponseId(2), q, beta).unwrap();
        let c = contradict_loss(&p, &r, ImageId(0), ResponseId(2), q, beta).unwrap();
        assert!(m + c >= 2.0 * LN2 - 1e-12);
        // At the reference both are exactly ln 2.
        assert_abs_diff_eq!(
            match_loss(&p, &p, ImageId(0), ResponseId(2), q, beta).unwrap(),
            LN2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            contradict_loss(&p, &p, ImageId(0), ResponseId(2), q, beta).unwrap(),
            LN2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn match_loss_is_dpo_over_null_context() {
        let p = random_policy(10, 2.0);
        let r = random_policy(11, 2.0);
        let q = QueryId(0);
        let y = ResponseId(1);
        let direct = match_loss(&p, &r, ImageId(1), y, q, 0.1).unwrap();
        let m = (p.log_prob(&Context::with_image(ImageId(1), q), y).unwrap()
            - r.log_prob(&Context::with_image(ImageId(1), q), y).unwrap())
            - (p.log_prob(&Context::text_only(q), y).unwrap()
                - r.log_prob(&Context::text_only(q), y).unwrap());
        assert_eq!(direct, neg_log_sigmoid(0.1 * m));
        // Contradict is the sign-reversed margin with its own coefficient.
        let contra = contradict_loss(&p, &r, ImageId(1), y, q, 0.3).unwrap();
        assert_eq!(contra, neg_log_sigmoid(0.3 * -m));
    }

    #[test]
    fn match_loss_monotone_in_matching_logit() {
        let p = random_policy(12, 2.0);
        let r = p.clone();
        let q = QueryId(0);
        let y = ResponseId(3);
        let base = match_loss(&p, &r, ImageId(0), y, q, 0.1).unwrap();
        let ci = p.context_index(&Context::with_image(ImageId(0), q)).unwrap();
        let mut logits = p.logits().to_vec();
        logits[ci * 4 + 3] += 0.25;
        let bumped = PolicyTable::from_logits(pair_contexts(), vocab(), logits).unwrap();
        assert!(match_loss(&bumped, &r, ImageId(0), y, q, 0.1).unwrap() < base);
    }

    #[test]
    fn cso_loss_components_and_symmetry() {
        let p = random_policy(13, 2.0);
        let r = random_policy(14, 2.0);
        let pr = pair();
        let cso = cso_loss(&p, &r, &pr, 0.1, 0.1).unwrap();
        let q = pr.query_id;
        assert_eq!(
            cso.match_w,
            match_loss(&p, &r, pr.chosen_image, pr.chosen_response, q, 0.1).unwrap()
        );
        assert_eq!(
            cso.contradict_l,
            contradict_loss(&p, &r, pr.rejected_image, pr.chosen_response, q, 0.1).unwrap()
        );
        assert_eq!(
            cso.match_l,
            match_loss(&p, &r, pr.rejected_image, pr.rejected_response, q, 0.1).unwrap()
        );
        assert_eq!(
            cso.contradict_w,
            contradict_loss(&p, &r, pr.chosen_image, pr.rejected_response, q, 0.1).unwrap()
        );
        // Exchanging the chosen and rejected image-text pairings permutes the
        // four terms, leaving the sum unchanged.
        let swapped = PreferencePair {
            chosen_image: pr.rejected_image,
            rejected_image: pr.chosen_image,
            chosen_response: pr.rejected_response,
            rejected_response: pr.chosen_response,
            ..pr
        };
        let cso_swapped = cso_loss(&p, &r, &swapped, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(cso.total, cso_swapped.total, epsilon = 1e-12);
        // At the reference all four margins are zero.
        let at_ref = cso_loss(&p, &p, &pr, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(at_ref.total, 4.0 * LN2, epsilon = 1e-14);
    }

    #[test]
    fn scpo_loss_breakdown_identities() {
        let hp = Hyperparams::default();
        for i in 0..100 {
            let p = random_policy(6000 + i, 3.0);
            let r = random_policy(8000 + i, 3.0);
            let b = scpo_loss(&p, &r, &pair(), &hp).unwrap();
            assert_eq!(b.l_cco, b.l_text + b.l_image);
            assert_eq!(b.l_cso, ((b.l_match_w + b.l_contradict_l) + b.l_match_l) + b.l_contradict_w);
            assert_eq!(b.l_total, b.l_cco + hp.lambda * b.l_cso);
            for v in b.components() {
                assert!(v > 0.0 && v.is_finite());
            }
        }
    }

    #[test]
    fn scpo_loss_at_reference_with_default_lambda() {
        let p = random_policy(15, 3.0);
        let hp = Hyperparams::default();
        let b = scpo_loss(&p, &p, &pair(), &hp).unwrap();
        // 2 ln 2 + 0.2 · 4 ln 2 = 2.8 ln 2 ≈ 1.940812
        assert_abs_diff_eq!(b.l_total, 2.8 * LN2, epsilon = 1e-12);
        assert_abs_diff_eq!(b.l_total, 1.940_812_105_567_847, epsilon = 1e-9);
    }

    #[test]
    fn scpo_loss_lambda_edges() {
        let p = random_policy(16, 2.0);
        let r = random_policy(17, 2.0);
        let hp = Hyperparams { lambda: 0.0, ..Hyperparams::default() };
        let b0 = scpo_loss(&p, &r, &pair(), &hp).unwrap();
        assert_eq!(b0.l_total, b0.l_cco);
        let hp = Hyperparams { lambda: 1.0, ..hp };
        let b1 = scpo_loss(&p, &r, &pair(), &hp).unwrap();
        assert_eq!(b1.l_total, b1.l_cco + b1.l_cso);
    }

    #[test]
    fn scpo_grad_matches_finite_differences() {
        let hp = Hyperparams::default();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let p = random_policy(9000 + i, 2.0);
            let r = random_policy(11000 + i, 2.0);
            let pr = pair();
            let grad = scpo_grad(&p, &r, &pr, &hp).unwrap();
            for ci in 0..3 {
                for k in 0..4 {
                    let mut plus = p.logits().to_vec();
                    plus[ci * 4 + k] += h;
                    let mut minus = p.logits().to_vec();
                    minus[ci * 4 + k] -= h;
                    let lp = scpo_loss(
                        &PolicyTable::from_logits(pair_contexts(), vocab(), plus).unwrap(),
                        &r,
                        &pr,
                        &hp,
                    )
                    .unwrap()
                    .l_total;
                    let lm = scpo_loss(
                        &PolicyTable::from_logits(pair_contexts(), vocab(), minus).unwrap(),
                        &r,
                        &pr,
                        &hp,
                    )
                    .unwrap()
                    .l_total;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = grad.entry(ci, k);
                    // The floor keeps central-difference roundoff (absolute
                    // noise ~1e-11 here) from registering as relative error
                    // on near-cancelled entries.
                    let denom = a.abs().max(fd.abs()).max(1e-4);
                    worst = worst.max(((a - fd) / denom).abs());
                }
            }
        }
        assert!(worst <= 1e-5, "max relative error {worst}");
    }

    #[test]
    fn scpo_grad_zero_margin_factor() {
        // At pi = ref every margin is zero and each term carries the
        // σ(0) = 1/2 factor, i.e. -β/2 = -0.05 per margin. On the uniform
        // 4-response table with λ = 0 the chosen row receives, by hand:
        //   at y_w: text -0.05·(δ_w - δ_l) = -0.05, image -0.05·(1 - 1/4)
        //   at y_l: text +0.05,             image -0.05·(0 - 1/4)
        let p = PolicyTable::uniform(pair_contexts(), vocab()).unwrap();
        let hp = Hyperparams { lambda: 0.0, ..Hyperparams::default() };
        let grad = scpo_grad(&p, &p, &pair(), &hp).unwrap();
        let ci = p.context_index(&pair().chosen_context()).unwrap();
        let yw = p.response_index(pair().chosen_response).unwrap();
        let yl = p.response_index(pair().rejected_response).unwrap();
        assert_abs_diff_eq!(grad.entry(ci, yw), -0.05 - 0.05 * 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(grad.entry(ci, yl), 0.05 + 0.05 * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn scpo_grad_untouched_contexts_are_exactly_zero() {
        let mut contexts = pair_contexts();
        contexts.push(Context::with_image(ImageId(7), QueryId(3)));
        let mut rng = stream(33, "objectives/zero", 0);
        let p = PolicyTable::random(contexts.clone(), vocab(), 2.0, &mut rng).unwrap();
        let r = PolicyTable::random(contexts, vocab(), 2.0, &mut rng).unwrap();
        let grad = scpo_grad(&p, &r, &pair(), &Hyperparams::default()).unwrap();
        assert!(grad.row(3).is_none());
        assert_eq!(grad.entry(3, 0), 0.0);
    }

    #[test]
    fn margin_grad_factor_limits() {
        assert_abs_diff_eq!(margin_grad_factor(0.0, 0.1), -0.05, epsilon = 1e-15);
        assert!(margin_grad_factor(500.0, 0.1).abs() < 1e-20);
        assert_abs_diff_eq!(margin_grad_factor(-500.0, 0.1), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn batch_reduction_is_compensated_mean() {
        let hp = Hyperparams::default();
        let p = random_policy(18, 2.0);
        let r = random_policy(19, 2.0);
        let pairs: Vec<PreferencePair> = (0..5)
            .map(|i| PreferencePair {
                pair_id: PairId(i),
                chosen_response: ResponseId(i % 4),
                rejected_response: ResponseId((i + 1) % 4),
                ..pair()
            })
            .collect();
        let batch = batch_loss(&p, &r, &pairs, &hp).unwrap();
        let mut total = 0.0;
        for pr in &pairs {
            total += scpo_loss(&p, &r, pr, &hp).unwrap().l_total;
        }
        assert_abs_diff_eq!(batch.l_total, total / 5.0, epsilon = 1e-14);

        let bg = batch_grad(&p, &r, &pairs, &hp).unwrap();
        let mut acc = GradTable::new(4);
        for pr in &pairs {
            let g = scpo_grad(&p, &r, pr, &hp).unwrap();
            for (ci, row) in g.iter_rows() {
                for (k, v) in row.iter().enumerate() {
                    acc.add_entry(ci, k, v / 5.0);
                }
            }
        }
        for (ci, row) in bg.iter_rows() {
            for (k, v) in row.iter().enumerate() {
                assert_abs_diff_eq!(*v, acc.entry(ci, k), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn batch_loss_rejects_empty_input() {
        let p = random_policy(20, 1.0);
        assert!(batch_loss(&p, &p, &[], &Hyperparams::default()).is_err());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let hp = Hyperparams { beta: 0.0, ..Hyperparams::default() };
        assert!(hp.validate().is_err());
        let hp = Hyperparams { lambda: -0.1, ..Hyperparams::default() };
        assert!(hp.validate().is_err());
        let hp = Hyperparams { learning_rate: 0.0, ..Hyperparams::default() };
        assert!(hp.validate().is_ok());
        let hp = Hyperparams { batch_size: 0, ..Hyperparams::default() };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn preference_pair_lookup_errors_propagate() {
        let p = random_policy(21, 1.0);
        let bad = PreferencePair { chosen_image: ImageId(42), ..pair() };
        let err = scpo_loss(&p, &p, &bad, &Hyperparams::default()).unwrap_err();
        assert_eq!(
            err,
            ModelError::UnknownContext(Context::new(
                ImageSlot::Image(ImageId(42)),
                QueryId(0)
            ))
        );
    }

    proptest::proptest! {
        #[test]
        fn losses_stay_positive_and_decompose(
            pi_logits in proptest::collection::vec(-6.0f64..6.0, 12),
            ref_logits in proptest::collection::vec(-6.0f64..6.0, 12),
            lambda in 0.0f64..2.0,
        ) {
            let p = PolicyTable::from_logits(pair_contexts(), vocab(), pi_logits).unwrap();
            let r = PolicyTable::from_logits(pair_contexts(), vocab(), ref_logits).unwrap();
            let hp = Hyperparams { lambda, ..Hyperparams::default() };
            let b = scpo_loss(&p, &r, &pair(), &hp).unwrap();
            for v in b.components() {
                proptest::prop_assert!(v > 0.0 && v.is_finite());
            }
            proptest::prop_assert_eq!(b.l_cco, b.l_text + b.l_image);
            proptest::prop_assert_eq!(b.l_total, b.l_cco + lambda * b.l_cso);
        }

        #[test]
        fn cso_swap_symmetry_holds_for_random_tables(
            pi_logits in proptest::collection::vec(-6.0f64..6.0, 12),
            ref_logits in proptest::collection::vec(-6.0f64..6.0, 12),
        ) {
            let p = PolicyTable::from_logits(pair_contexts(), vocab(), pi_logits).unwrap();
            let r = PolicyTable::from_logits(pair_contexts(), vocab(), ref_logits).unwrap();
            let pr = pair();
            let swapped = PreferencePair {
                chosen_image: pr.rejected_image,
                rejected_image: pr.chosen_image,
                chosen_response: pr.rejected_response,
                rejected_response: pr.chosen_response,
                ..pr
            };
            let a = cso_loss(&p, &r, &pr, 0.1, 0.1).unwrap().total;
            let b = cso_loss(&p, &r, &swapped, 0.1, 0.1).unwrap().total;
            proptest::prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
