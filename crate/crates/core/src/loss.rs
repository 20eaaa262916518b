//! Preference-loss kit over precomputed log-probabilities.
//!
//! Operates on per-sample sums of response log-probabilities under the
//! trained policy and a frozen reference policy; no model evaluation
//! happens here. Three objectives share one reward
//! `r = z_ref - beta * (policy_logprob - reference_logprob)`:
//!
//! * the positive variant scores high-quality samples by `sigma(r)` and
//!   low-quality ones by `sigma(r^2)`, pulling their reward toward zero
//!   instead of pushing it down;
//! * the plain variant negates the reward for low-quality samples;
//! * the pairwise objective scores good/bad response pairs through a
//!   logistic margin.
//!
//! Every loss carries analytic partial derivatives with respect to the
//! policy log-probabilities, validated against central finite differences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("batch estimate of z_ref needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("sample {id}: {message}")]
    InvalidSample { id: String, message: String },
    #[error("sample {id}: non-finite intermediate value in {what}")]
    NonFinite { id: String, what: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    High,
    Low,
}

/// One training sample: summed response log-probabilities under the
/// trained policy and the reference policy, plus its quality tag.
#[derive(Debug, Clone, Serialize)]
pub struct PktoSample {
    pub id: String,
    pub policy_logprob: f64,
    pub reference_logprob: f64,
    pub quality: Quality,
}

fn check_logprob(id: &str, name: &str, v: f64) -> Result<(), LossError> {
    if !v.is_finite() || v > 0.0 {
        return Err(LossError::InvalidSample {
            id: id.to_string(),
            message: format!("{name} must be finite and <= 0, got {v}"),
        });
    }
    Ok(())
}

impl PktoSample {
    pub fn new(
        id: impl Into<String>,
        policy_logprob: f64,
        reference_logprob: f64,
        quality: Quality,
    ) -> Result<Self, LossError> {
        let id = id.into();
        check_logprob(&id, "policy_logprob", policy_logprob)?;
        check_logprob(&id, "reference_logprob", reference_logprob)?;
        Ok(Self {
            id,
            policy_logprob,
            reference_logprob,
            quality,
        })
    }

    /// Copy with the policy log-probability shifted; used by the
    /// finite-difference checker, which may step past 0.
    fn with_policy_logprob(&self, value: f64) -> Self {
        Self {
            policy_logprob: value,
            ..self.clone()
        }
    }
}

/// Log-probabilities of one response under both policies.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogProbPair {
    pub policy_logprob: f64,
    pub reference_logprob: f64,
}

impl LogProbPair {
    fn log_ratio(&self) -> f64 {
        self.policy_logprob - self.reference_logprob
    }
}

/// A good/bad response pair to the same query.
#[derive(Debug, Clone, Serialize)]
pub struct DpoPair {
    pub id: String,
    pub good: LogProbPair,
    pub bad: LogProbPair,
}

impl DpoPair {
    pub fn new(
        id: impl Into<String>,
        good: LogProbPair,
        bad: LogProbPair,
    ) -> Result<Self, LossError> {
        let id = id.into();
        check_logprob(&id, "good.policy_logprob", good.policy_logprob)?;
        check_logprob(&id, "good.reference_logprob", good.reference_logprob)?;
        check_logprob(&id, "bad.policy_logprob", bad.policy_logprob)?;
        check_logprob(&id, "bad.reference_logprob", bad.reference_logprob)?;
        Ok(Self { id, good, bad })
    }
}

/// Where the baseline `z_ref` inside the reward comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ZRefMode {
    /// No baseline.
    Zero,
    /// Caller-provided value.
    Supplied { value: f64 },
    /// Seeded-derangement estimate over the batch itself.
    BatchEstimate { seed: u64 },
}

/// Loss hyperparameters; `lambda_high` weighs high-quality samples and
/// `lambda_low` low-quality ones.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub z_ref: ZRefMode,
}

impl LossConfig {
    pub fn new(
        beta: f64,
        lambda_high: f64,
        lambda_low: f64,
        z_ref: ZRefMode,
    ) -> Result<Self, LossError> {
        for (name, v) in [
            ("beta", beta),
            ("lambda_high", lambda_high),
            ("lambda_low", lambda_low),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(LossError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if let ZRefMode::Supplied { value } = z_ref {
            if !value.is_finite() {
                return Err(LossError::Invalid(format!(
                    "supplied z_ref must be finite, got {value}"
                )));
            }
        }
        Ok(Self {
            beta,
            lambda_high,
            lambda_low,
            z_ref,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda_high: 1.0,
            lambda_low: 1.0,
            z_ref: ZRefMode::Zero,
        }
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sattolo's algorithm: a uniformly random cyclic permutation, which has
/// no fixed points, so every position pairs with a different sample.
fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    perm
}

/// Batch estimate of the baseline: pair each sample's policy
/// log-probability with a different sample's reference log-probability
/// via a seeded derangement, average `beta * (policy - reference)` over
/// the mismatched pairs, and clamp at 0.
pub fn z_ref_estimate(batch: &[PktoSample], beta: f64, seed: u64) -> Result<f64, LossError> {
    if batch.len() < 2 {
        return Err(LossError::BatchTooSmall(batch.len()));
    }
    let perm = derangement(batch.len(), seed);
    let mean = batch
        .iter()
        .enumerate()
        .map(|(i, s)| beta * (s.policy_logprob - batch[perm[i]].reference_logprob))
        .sum::<f64>()
        / batch.len() as f64;
    Ok(mean.max(0.0))
}

fn resolve_z_ref(batch: &[PktoSample], cfg: &LossConfig) -> Result<f64, LossError> {
    match cfg.z_ref {
        ZRefMode::Zero => Ok(0.0),
        ZRefMode::Supplied { value } => Ok(value),
        ZRefMode::BatchEstimate { seed } => z_ref_estimate(batch, cfg.beta, seed),
    }
}

/// Per-sample evaluation detail.
#[derive(Debug, Clone, Serialize)]
pub struct SampleContribution {
    pub id: String,
    pub quality: Quality,
    /// Reward `z_ref - beta * (policy_logprob - reference_logprob)`.
    pub r: f64,
    /// Sigmoid argument after the quality-dependent transform.
    pub v: f64,
    /// `lambda * sigma(v)`.
    pub contribution: f64,
    /// Partial derivative of the mean loss w.r.t. this sample's policy
    /// log-probability, holding `z_ref` fixed.
    pub grad_policy_logprob: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub loss: f64,
    pub z_ref: f64,
    pub per_sample: Vec<SampleContribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LowQualityTransform {
    /// Low-quality samples score `sigma(r^2)`: squared error against a
    /// zero reward, keeping the policy near the reference on them.
    Squared,
    /// Low-quality samples score `sigma(-r)`.
    Negated,
}

fn kto_family_loss(
    batch: &[PktoSample],
    cfg: &LossConfig,
    transform: LowQualityTransform,
) -> Result<LossReport, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let z_ref = resolve_z_ref(batch, cfg)?;
    let n = batch.len() as f64;
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for sample in batch {
        let r = z_ref - cfg.beta * (sample.policy_logprob - sample.reference_logprob);
        let (lambda, v, dv_dr) = match (sample.quality, transform) {
            (Quality::High, _) => (cfg.lambda_high, r, 1.0),
            (Quality::Low, LowQualityTransform::Squared) => (cfg.lambda_low, r * r, 2.0 * r),
            (Quality::Low, LowQualityTransform::Negated) => (cfg.lambda_low, -r, -1.0),
        };
        let contribution = lambda * sigmoid(v);
        // dr/d(policy_logprob) = -beta; the mean divides by n.
        let grad_policy_logprob = lambda * sigmoid_derivative(v) * dv_dr * (-cfg.beta) / n;
        if !contribution.is_finite() || !grad_policy_logprob.is_finite() {
            return Err(LossError::NonFinite {
                id: sample.id.clone(),
                what: "contribution".to_string(),
            });
        }
        loss += contribution;
        per_sample.push(SampleContribution {
            id: sample.id.clone(),
            quality: sample.quality,
            r,
            v,
            contribution,
            grad_policy_logprob,
        });
    }
    Ok(LossReport {
        loss: loss / n,
        z_ref,
        per_sample,
    })
}

/// Positive variant: low-quality rewards are regularized toward zero via
/// `sigma(r^2)` instead of being negated.
pub fn pkto_loss(batch: &[PktoSample], cfg: &LossConfig) -> Result<LossReport, LossError> {
    kto_family_loss(batch, cfg, LowQualityTransform::Squared)
}

/// Plain variant: low-quality rewards are negated, `sigma(-r)`.
pub fn kto_loss(batch: &[PktoSample], cfg: &LossConfig) -> Result<LossReport, LossError> {
    kto_family_loss(batch, cfg, LowQualityTransform::Negated)
}

/// Which direction the pairwise logistic margin takes.
///
/// `BadMinusGood` matches the formulation this kit descends from;
/// `GoodMinusBad` is the conventional direction elsewhere. The flag exists
/// so callers can choose without the kit guessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpoConvention {
    #[default]
    BadMinusGood,
    GoodMinusBad,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairContribution {
    pub id: String,
    /// Sigmoid argument `beta * (lr_first - lr_second)` per the convention.
    pub margin: f64,
    /// `-ln sigma(margin)`.
    pub loss_term: f64,
    pub grad_good_policy_logprob: f64,
    pub grad_bad_policy_logprob: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DpoReport {
    pub loss: f64,
    pub convention: DpoConvention,
    pub per_pair: Vec<PairContribution>,
}

/// Pairwise logistic loss over good/bad response pairs:
/// mean of `-ln sigma(beta * (log_ratio(bad) - log_ratio(good)))` under
/// the default convention.
pub fn dpo_loss(
    pairs: &[DpoPair],
    beta: f64,
    convention: DpoConvention,
) -> Result<DpoReport, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !beta.is_finite() || beta <= 0.0 {
        return Err(LossError::Invalid(format!("beta must be > 0, got {beta}")));
    }
    let n = pairs.len() as f64;
    let orientation = match convention {
        DpoConvention::BadMinusGood => 1.0,
        DpoConvention::GoodMinusBad => -1.0,
    };
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut loss = 0.0;
    for pair in pairs {
        let margin = beta * orientation * (pair.bad.log_ratio() - pair.good.log_ratio());
        let loss_term = softplus(-margin);
        // d(-ln sigma(u))/du = sigma(u) - 1.
        let du = (sigmoid(margin) - 1.0) / n;
        let grad_bad_policy_logprob = du * beta * orientation;
        let grad_good_policy_logprob = -du * beta * orientation;
        if !loss_term.is_finite() {
            return Err(LossError::NonFinite {
                id: pair.id.clone(),
                what: "loss_term".to_string(),
            });
        }
        loss += loss_term;
        per_pair.push(PairContribution {
            id: pair.id.clone(),
            margin,
            loss_term,
            grad_good_policy_logprob,
            grad_bad_policy_logprob,
        });
    }
    Ok(DpoReport {
        loss: loss / n,
        convention,
        per_pair,
    })
}

/// Which loss a gradient check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossOp {
    Pkto,
    Kto,
    Dpo,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub input: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_relative_deviation: f64,
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Deviation relative to gradient magnitude, floored so that a pair of
/// effectively-zero gradients compares as equal.
fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

/// Compare analytic gradients against an independently computed set.
pub fn compare_gradients(
    labels: &[String],
    analytic: &[f64],
    numeric: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, LossError> {
    if analytic.len() != numeric.len() || analytic.len() != labels.len() {
        return Err(LossError::Invalid(format!(
            "gradient length mismatch: {} labels, {} analytic, {} numeric",
            labels.len(),
            analytic.len(),
            numeric.len()
        )));
    }
    let entries: Vec<GradCheckEntry> = labels
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(label, (&a, &n))| GradCheckEntry {
            input: label.clone(),
            analytic: a,
            numeric: n,
            relative_deviation: relative_deviation(a, n),
        })
        .collect();
    let max_relative_deviation = entries
        .iter()
        .map(|e| e.relative_deviation)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_relative_deviation <= tolerance,
        max_relative_deviation,
        tolerance,
        step,
        entries,
    })
}

fn kto_family_gradcheck(
    op: LossOp,
    batch: &[PktoSample],
    cfg: &LossConfig,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, LossError> {
    let eval = |b: &[PktoSample]| match op {
        LossOp::Pkto => pkto_loss(b, cfg),
        LossOp::Kto => kto_loss(b, cfg),
        LossOp::Dpo => unreachable!("dispatched separately"),
    };
    let base = eval(batch)?;
    let analytic: Vec<f64> = base
        .per_sample
        .iter()
        .map(|s| s.grad_policy_logprob)
        .collect();
    let labels: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();

    let mut numeric = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut plus = batch.to_vec();
        plus[i] = plus[i].with_policy_logprob(batch[i].policy_logprob + h);
        let mut minus = batch.to_vec();
        minus[i] = minus[i].with_policy_logprob(batch[i].policy_logprob - h);
        numeric.push((eval(&plus)?.loss - eval(&minus)?.loss) / (2.0 * h));
    }
    compare_gradients(&labels, &analytic, &numeric, h, tolerance)
}

fn dpo_gradcheck(
    pairs: &[DpoPair],
    beta: f64,
    convention: DpoConvention,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, LossError> {
    let base = dpo_loss(pairs, beta, convention)?;
    let mut labels = Vec::new();
    let mut analytic = Vec::new();
    for p in &base.per_pair {
        labels.push(format!("{}:good", p.id));
        analytic.push(p.grad_good_policy_logprob);
        labels.push(format!("{}:bad", p.id));
        analytic.push(p.grad_bad_policy_logprob);
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..pairs.len() {
        for good_side in [true, false] {
            let perturb = |delta: f64| {
                let mut copy: Vec<DpoPair> = pairs.to_vec();
                if good_side {
                    copy[i].good.policy_logprob += delta;
                } else {
                    copy[i].bad.policy_logprob += delta;
                }
                copy
            };
            let plus = dpo_loss(&perturb(h), beta, convention)?.loss;
            let minus = dpo_loss(&perturb(-h), beta, convention)?.loss;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    compare_gradients(&labels, &analytic, &numeric, h, tolerance)
}

/// Validate a loss's analytic gradient against central finite differences
/// with step `h`. Requires a `z_ref` mode that does not depend on the
/// perturbed inputs. A failing check is a value, not an error.
pub fn finite_difference_check(
    op: LossOp,
    batch: &[PktoSample],
    dpo_pairs: &[DpoPair],
    cfg: &LossConfig,
    dpo_convention: DpoConvention,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, LossError> {
    if !(h.is_finite() && h > 0.0 && tolerance.is_finite() && tolerance > 0.0) {
        return Err(LossError::Invalid(
            "step and tolerance must be positive finite values".into(),
        ));
    }
    match op {
        LossOp::Pkto | LossOp::Kto => {
            if matches!(cfg.z_ref, ZRefMode::BatchEstimate { .. }) {
                return Err(LossError::Invalid(
                    "finite differences require z_ref mode zero or supplied".into(),
                ));
            }
            kto_family_gradcheck(op, batch, cfg, h, tolerance)
        }
        LossOp::Dpo => dpo_gradcheck(dpo_pairs, cfg.beta, dpo_convention, h, tolerance),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, policy: f64, reference: f64, quality: Quality) -> PktoSample {
        PktoSample::new(id, policy, reference, quality).unwrap()
    }

    fn cfg(beta: f64) -> LossConfig {
        LossConfig::new(beta, 1.0, 1.0, ZRefMode::Zero).unwrap()
    }

    #[test]
    fn sample_validation() {
        assert!(PktoSample::new("a", 0.5, -1.0, Quality::High).is_err());
        assert!(PktoSample::new("a", -1.0, f64::NAN, Quality::High).is_err());
        assert!(PktoSample::new("a", 0.0, -1.0, Quality::High).is_ok());
    }

    #[test]
    fn high_sample_zero_reward() {
        let batch = vec![sample("a", -2.0, -2.0, Quality::High)];
        let report = pkto_loss(&batch, &cfg(0.5)).unwrap();
        assert_eq!(report.per_sample[0].r, 0.0);
        assert_eq!(report.per_sample[0].contribution, 0.5);
        assert_eq!(report.loss, 0.5);
    }

    #[test]
    fn high_sample_worked_value() {
        // log ratio 2.0, beta 0.5 -> r = -1, contribution sigma(-1).
        let batch = vec![sample("a", -1.0, -3.0, Quality::High)];
        let report = pkto_loss(&batch, &cfg(0.5)).unwrap();
        assert!((report.per_sample[0].r - (-1.0)).abs() < 1e-15);
        assert!((report.per_sample[0].contribution - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn low_sample_squares_reward() {
        // r = -1 -> v = 1 -> sigma(1).
        let batch = vec![sample("a", -1.0, -3.0, Quality::Low)];
        let report = pkto_loss(&batch, &cfg(0.5)).unwrap();
        assert!((report.per_sample[0].v - 1.0).abs() < 1e-15);
        assert!((report.per_sample[0].contribution - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn variants_agree_on_high_batches() {
        let batch = vec![
            sample("a", -1.5, -2.0, Quality::High),
            sample("b", -4.0, -3.0, Quality::High),
        ];
        let c = cfg(0.3);
        let p = pkto_loss(&batch, &c).unwrap();
        let k = kto_loss(&batch, &c).unwrap();
        assert_eq!(p.loss, k.loss);
        for (a, b) in p.per_sample.iter().zip(&k.per_sample) {
            assert_eq!(a.contribution, b.contribution);
        }
    }

    #[test]
    fn variants_coincide_on_low_at_zero_and_minus_one() {
        // r = 0: sigma(0) on both sides; r = -1: sigma((-1)^2) = sigma(1) = sigma(-r).
        for (policy, reference) in [(-2.0, -2.0), (-1.0, -3.0)] {
            let batch = vec![sample("a", policy, reference, Quality::Low)];
            let c = cfg(0.5);
            let p = pkto_loss(&batch, &c).unwrap();
            let k = kto_loss(&batch, &c).unwrap();
            assert!(
                (p.per_sample[0].contribution - k.per_sample[0].contribution).abs() < 1e-12,
                "r = {}",
                p.per_sample[0].r
            );
        }
    }

    #[test]
    fn low_contribution_minimized_at_zero_reward() {
        // sigma(r^2) >= 0.5 everywhere, with the minimum at r = 0.
        let c = cfg(1.0);
        let at_zero = pkto_loss(&[sample("a", -2.0, -2.0, Quality::Low)], &c)
            .unwrap()
            .loss;
        assert_eq!(at_zero, 0.5);
        for lr in [-3.0f64, -0.7, 0.4, 2.5] {
            let batch = vec![sample("a", -4.0 + lr, -4.0, Quality::Low)];
            let loss = pkto_loss(&batch, &c).unwrap().loss;
            assert!(loss >= 0.5 - 1e-15, "loss {loss} at log ratio {lr}");
        }
    }

    #[test]
    fn z_ref_modes() {
        let batch = vec![
            sample("a", -1.0, -1.0, Quality::High),
            sample("b", -2.0, -2.0, Quality::High),
            sample("c", -3.0, -3.0, Quality::High),
        ];
        assert_eq!(z_ref_estimate(&batch, 1.0, 7).unwrap(), 0.0);
        assert!(matches!(
            z_ref_estimate(&batch[..1], 1.0, 7),
            Err(LossError::BatchTooSmall(1))
        ));

        // The derangement mean telescopes to mean(policy) - mean(reference),
        // so any seed produces the same estimate.
        let skewed = vec![
            sample("a", -1.0, -1.2, Quality::High),
            sample("b", -2.0, -2.3, Quality::High),
            sample("c", -3.0, -3.1, Quality::High),
        ];
        let expected = (0.2 + 0.3 + 0.1) / 3.0;
        for seed in 0..20 {
            let z = z_ref_estimate(&skewed, 1.0, seed).unwrap();
            assert!((z - expected).abs() < 1e-12);
        }

        // Negative mean clamps to zero.
        let negative = vec![
            sample("a", -2.0, -1.0, Quality::High),
            sample("b", -3.0, -1.0, Quality::High),
        ];
        assert_eq!(z_ref_estimate(&negative, 1.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_mean_example() {
        // Three mismatched diffs averaging 0.2 clamp to 0.2.
        let batch = vec![
            sample("a", -1.0, -1.2, Quality::High),
            sample("b", -2.0, -1.9, Quality::High),
            sample("c", -3.0, -3.5, Quality::High),
        ];
        // diffs with matched pairs: {0.2, -0.1, 0.5}; the derangement mean
        // telescopes to the same value.
        let z = z_ref_estimate(&batch, 1.0, 3).unwrap();
        assert!((z - 0.2).abs() < 1e-12);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for n in 2..12 {
            for seed in 0..30 {
                let p = derangement(n, seed);
                assert!(
                    p.iter().enumerate().all(|(i, &j)| i != j),
                    "n={n} seed={seed}"
                );
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn dpo_symmetric_point_is_ln_two() {
        let pair = DpoPair::new(
            "p",
            LogProbPair {
                policy_logprob: -2.0,
                reference_logprob: -2.5,
            },
            LogProbPair {
                policy_logprob: -3.0,
                reference_logprob: -3.5,
            },
        )
        .unwrap();
        let report = dpo_loss(&[pair], 1.0, DpoConvention::BadMinusGood).unwrap();
        assert!((report.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dpo_worked_values() {
        // log_ratio(bad) = 1, log_ratio(good) = 0 -> -ln sigma(1).
        let pair = DpoPair::new(
            "p",
            LogProbPair {
                policy_logprob: -2.0,
                reference_logprob: -2.0,
            },
            LogProbPair {
                policy_logprob: -1.0,
                reference_logprob: -2.0,
            },
        )
        .unwrap();
        let loss = dpo_loss(
            std::slice::from_ref(&pair),
            1.0,
            DpoConvention::BadMinusGood,
        )
        .unwrap()
        .loss;
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-12);

        // Flipping the convention lands on -ln sigma(-1).
        let loss = dpo_loss(&[pair], 1.0, DpoConvention::GoodMinusBad)
            .unwrap()
            .loss;
        assert!((loss - 1.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_passes_on_mixed_batch() {
        let batch = vec![
            sample("a", -1.5, -2.0, Quality::High),
            sample("b", -4.0, -3.0, Quality::Low),
            sample("c", -0.5, -0.25, Quality::Low),
            sample("d", -2.5, -2.0, Quality::High),
        ];
        let c = LossConfig::new(0.5, 1.0, 2.0, ZRefMode::Supplied { value: 0.3 }).unwrap();
        for op in [LossOp::Pkto, LossOp::Kto] {
            let report = finite_difference_check(
                op,
                &batch,
                &[],
                &c,
                DpoConvention::BadMinusGood,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{op:?}: {report:?}");
        }
    }

    #[test]
    fn gradcheck_rejects_batch_estimate_mode() {
        let batch = vec![
            sample("a", -1.5, -2.0, Quality::High),
            sample("b", -4.0, -3.0, Quality::Low),
        ];
        let c = LossConfig::new(0.5, 1.0, 1.0, ZRefMode::BatchEstimate { seed: 1 }).unwrap();
        assert!(finite_difference_check(
            LossOp::Pkto,
            &batch,
            &[],
            &c,
            DpoConvention::BadMinusGood,
            1e-5,
            1e-4
        )
        .is_err());
    }

    #[test]
    fn gradcheck_detects_injected_bias() {
        let batch = vec![
            sample("a", -1.5, -2.0, Quality::High),
            sample("b", -4.0, -3.0, Quality::Low),
        ];
        let c = cfg(0.5);
        let honest = finite_difference_check(
            LossOp::Pkto,
            &batch,
            &[],
            &c,
            DpoConvention::BadMinusGood,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(honest.passed);

        let labels: Vec<String> = honest.entries.iter().map(|e| e.input.clone()).collect();
        let biased: Vec<f64> = honest.entries.iter().map(|e| e.analytic + 0.1).collect();
        let numeric: Vec<f64> = honest.entries.iter().map(|e| e.numeric).collect();
        let report = compare_gradients(&labels, &biased, &numeric, 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn gradcheck_trivially_passes_on_flat_loss() {
        // With both sides of a pair identical, every gradient is zero but
        // still within tolerance.
        let lp = LogProbPair {
            policy_logprob: -2.0,
            reference_logprob: -2.0,
        };
        let pairs = vec![DpoPair::new("p", lp, lp).unwrap()];
        let report = finite_difference_check(
            LossOp::Dpo,
            &[],
            &pairs,
            &cfg(1.0),
            DpoConvention::BadMinusGood,
            1e-5,
            1e-4,
        )
        .unwrap();
        // Gradients are ±beta/2 here (sigma(0) - 1 = -0.5), not zero; the
        // all-zero case is the degenerate comparison below.
        assert!(report.passed);
        let zeros = vec![0.0; 4];
        let labels: Vec<String> = (0..4).map(|i| format!("g{i}")).collect();
        let flat = compare_gradients(&labels, &zeros, &zeros, 1e-5, 1e-4).unwrap();
        assert!(flat.passed);
        assert_eq!(flat.max_relative_deviation, 0.0);
    }

    #[test]
    fn empty_batches_rejected() {
        assert!(matches!(
            pkto_loss(&[], &cfg(1.0)),
            Err(LossError::EmptyBatch)
        ));
        assert!(matches!(
            dpo_loss(&[], 1.0, DpoConvention::BadMinusGood),
            Err(LossError::EmptyBatch)
        ));
    }
}
