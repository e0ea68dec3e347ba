//! Shared numerically stable primitives: log-sum-exp, sigmoid, softplus,
//! and compensated (Neumaier) summation for deterministic reductions.

/// Numerically stable log(Σᵢ exp(xᵢ)) via the max-shift trick.
///
/// Returns `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for &v in values {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Stable logistic sigmoid σ(x) = 1 / (1 + e⁻ˣ).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softplus ln(1 + eˣ) = max(x, 0) + ln1p(e^{-|x|}).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// -ln σ(z), evaluated as softplus(-z). Never exponentiates the raw argument,
/// so it stays finite and accurate for |z| in the hundreds.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// Neumaier-compensated running sum. Accumulation order is whatever order the
/// caller feeds values in; the compensation term recovers the low-order bits
/// an ordinary f64 sum would drop.
#[derive(Clone, Copy, Debug, Default)]
pub struct Neumaier {
    sum: f64,
    compensation: f64,
}

impl Neumaier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated mean over a slice, in slice order.
pub fn compensated_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut acc = Neumaier::new();
    for &v in values {
        acc.add(v);
    }
    acc.total() / values.len() as f64
}
