//! Reference implementations for validating [`crate::analytics`].
//!
//! Nothing here calls into `analytics`: the synthesis rule is re-derived
//! locally (view `d` is obtained when it is received, or when some received
//! `a < d < b` has `b - a <= R`) and probabilities come either from
//! exhaustive enumeration of every individual broadcast or from plain Monte
//! Carlo with a fixed seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::ZipfPeriodicSubscription;
use crate::error::{check_probability, Error, Result};
use crate::model::{
    ApTransmissionDistribution, Subscription, SynthesisConfig, TransmissionPlan, UserChannelState, View,
};
use crate::rng::{stream, stream_rng, SimRng};

/// Largest number of individual broadcasts [`enumerate_failure_prob`] accepts.
pub const ENUMERATION_LIMIT: usize = 24;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
    pub rng_seed: u64,
}

impl McEstimate {
    /// Estimate from `hits` successes out of `samples` Bernoulli trials.
    pub fn from_counts(hits: u64, samples: u64, rng_seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument("Monte Carlo run produced no samples".into()));
        }
        let n = samples as f64;
        let mean = hits as f64 / n;
        let std_error = if samples > 1 { (mean * (1.0 - mean) / (n - 1.0)).sqrt() } else { 0.0 };
        Ok(McEstimate { mean, std_error, samples, rng_seed })
    }

    /// Estimate from real-valued samples given their sum and sum of squares.
    pub fn from_moments(sum: f64, sum_sq: f64, samples: u64, rng_seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument("Monte Carlo run produced no samples".into()));
        }
        let n = samples as f64;
        let mean = sum / n;
        let var = if samples > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        Ok(McEstimate { mean, std_error: (var / n).sqrt(), samples, rng_seed })
    }

    pub fn within(&self, value: f64, sigmas: f64) -> bool {
        (self.mean - value).abs() <= sigmas * self.std_error
    }
}

/// Whether `view` is obtained given which views were received
/// (`received[v]` for `v` in `1..=M`; index 0 unused).
fn obtained(received: &[bool], range: usize, view: View) -> bool {
    if received[view] {
        return true;
    }
    let total = received.len() - 1;
    let lo = view.saturating_sub(range - 1).max(1);
    for a in (lo..view).filter(|&a| received[a]) {
        let hi = (a + range).min(total);
        if (view + 1..=hi).any(|b| received[b]) {
            return true;
        }
    }
    false
}

/// Mark each position obtained/not for a whole received sequence in one pass
/// using the nearest received neighbour on either side.
fn obtained_sequence(received: &[bool], range: usize) -> Vec<bool> {
    let n = received.len();
    let mut prev = vec![None; n];
    let mut last = None;
    for i in 0..n {
        prev[i] = last;
        if received[i] {
            last = Some(i);
        }
    }
    let mut out = vec![false; n];
    let mut next = None;
    for i in (0..n).rev() {
        out[i] = received[i]
            || matches!((prev[i], next), (Some(a), Some(b)) if b - a <= range);
        if received[i] {
            next = Some(i);
        }
    }
    out
}

/// Exact failure probability of `desired` by summing over every joint
/// reception outcome of every individual broadcast the user can hear.
pub fn enumerate_failure_prob(
    cfg: &SynthesisConfig,
    user: &UserChannelState,
    plan: &TransmissionPlan,
    desired: View,
) -> Result<f64> {
    cfg.check_view(desired)?;
    let total = cfg.total_views();
    // (view, loss) per individual broadcast
    let mut broadcasts: Vec<(View, f64)> = Vec::new();
    for (view, link, n) in plan.iter() {
        if view > total {
            return Err(Error::ViewOutOfRange { view, total_views: total });
        }
        if let Some(p) = user.loss_on(link) {
            broadcasts.extend(std::iter::repeat_n((view, p), n as usize));
        }
    }
    if broadcasts.len() > ENUMERATION_LIMIT {
        return Err(Error::OutcomeSpaceTooLarge { broadcasts: broadcasts.len(), limit: ENUMERATION_LIMIT });
    }

    let mut received = vec![false; total + 1];
    let mut failure = 0.0;
    let mut mass = 0.0;
    for outcome in 0u32..(1u32 << broadcasts.len()) {
        received.iter_mut().for_each(|r| *r = false);
        let mut prob = 1.0;
        for (bit, &(view, p)) in broadcasts.iter().enumerate() {
            if outcome >> bit & 1 == 1 {
                prob *= 1.0 - p;
                received[view] = true;
            } else {
                prob *= p;
            }
        }
        mass += prob;
        if !obtained(&received, cfg.dibr_range(), desired) {
            failure += prob;
        }
    }
    debug_assert!((mass - 1.0).abs() < 1e-9, "outcome mass {mass}");
    Ok(failure)
}

fn oracle_rng(seed: u64) -> SimRng {
    stream_rng(seed, stream::ORACLE)
}

/// Toss `views` coins (heads with probability `1 - loss_p`), mark each with
/// probability `p_select`, and report the fraction of marked views obtained.
pub fn mc_alpha_uniform(loss_p: f64, range: usize, views: usize, p_select: f64, seed: u64) -> Result<McEstimate> {
    check_probability(loss_p)?;
    check_probability(p_select)?;
    check_range(range)?;
    let mut rng = oracle_rng(seed);
    let mut received = Vec::with_capacity(views);
    let mut selected = Vec::with_capacity(views);
    for _ in 0..views {
        received.push(rng.random::<f64>() >= loss_p);
        selected.push(rng.random::<f64>() < p_select);
    }
    let got = obtained_sequence(&received, range);
    count_selected(&got, &selected, seed)
}

/// As [`mc_alpha_uniform`] with the periodic Zipf subscription and
/// `success_p` the reception probability.
pub fn mc_alpha_zipf_consecutive(
    success_p: f64,
    range: usize,
    zipf: &ZipfPeriodicSubscription,
    views: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_probability(success_p)?;
    check_range(range)?;
    let mut rng = oracle_rng(seed);
    let m = zipf.period();
    let mut received = Vec::with_capacity(views);
    let mut selected = Vec::with_capacity(views);
    for k in 1..=views {
        let phase = match k % m {
            0 => m,
            r => r,
        };
        let weight = zipf.normalizer() / (phase as f64).powf(zipf.exponent());
        received.push(rng.random::<f64>() < success_p);
        selected.push(rng.random::<f64>() < weight);
    }
    let got = obtained_sequence(&received, range);
    count_selected(&got, &selected, seed)
}

/// Only views `1, 1 + spacing, 1 + 2 spacing, ...` are transmitted; every
/// view is subscribed.
pub fn mc_alpha_spaced(loss_p: f64, range: usize, spacing: usize, views: usize, seed: u64) -> Result<McEstimate> {
    check_probability(loss_p)?;
    check_range(range)?;
    if spacing == 0 || spacing > range {
        return Err(Error::InvalidSynthesis(format!("spacing {spacing} must lie in 1..={range}")));
    }
    let mut rng = oracle_rng(seed);
    let received: Vec<bool> = (0..views)
        .map(|i| {
            let success = rng.random::<f64>() >= loss_p;
            i % spacing == 0 && success
        })
        .collect();
    let got = obtained_sequence(&received, range);
    let hits = got.iter().filter(|&&g| g).count() as u64;
    McEstimate::from_counts(hits, views as u64, seed)
}

fn check_range(range: usize) -> Result<()> {
    if range == 0 {
        return Err(Error::InvalidSynthesis("dibr_range must be at least 1".into()));
    }
    Ok(())
}

fn count_selected(got: &[bool], selected: &[bool], seed: u64) -> Result<McEstimate> {
    let mut hits = 0;
    let mut samples = 0;
    for (&g, &s) in got.iter().zip(selected) {
        if s {
            samples += 1;
            hits += u64::from(g);
        }
    }
    McEstimate::from_counts(hits, samples, seed)
}

/// Sample one frame: which views the user receives at least once.
fn sample_receptions(rng: &mut SimRng, user: &UserChannelState, plan: &TransmissionPlan, received: &mut [bool]) {
    received.iter_mut().for_each(|r| *r = false);
    for (view, link, n) in plan.iter() {
        if let Some(p) = user.loss_on(link) {
            for _ in 0..n {
                if rng.random::<f64>() >= p {
                    received[view] = true;
                }
            }
        }
    }
}

/// Monte Carlo estimate of the probability that every broadcast of `view` is lost.
pub fn mc_view_loss(
    user: &UserChannelState,
    plan: &TransmissionPlan,
    view: View,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    let total = plan.total_views();
    if !(1..=total).contains(&view) {
        return Err(Error::ViewOutOfRange { view, total_views: total });
    }
    let mut rng = oracle_rng(seed);
    let mut received = vec![false; total + 1];
    let mut lost = 0;
    for _ in 0..samples {
        sample_receptions(&mut rng, user, plan, &mut received);
        lost += u64::from(!received[view]);
    }
    McEstimate::from_counts(lost, samples, seed)
}

/// Monte Carlo estimate of the view loss under a randomized broadcast count:
/// draw `n` per link, then `n` independent receptions.
pub fn mc_loss_randomized(
    user: &UserChannelState,
    ap: &ApTransmissionDistribution,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    let mut rng = oracle_rng(seed);
    let mut lost = 0;
    for _ in 0..samples {
        let mut any = false;
        for (link, p) in user.links() {
            let dist = ap.get(link).ok_or(Error::MissingLink(link))?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut count = dist.len() - 1;
            for (n, q) in dist.iter().enumerate() {
                acc += q;
                if u < acc {
                    count = n;
                    break;
                }
            }
            for _ in 0..count {
                if rng.random::<f64>() >= p {
                    any = true;
                }
            }
        }
        lost += u64::from(!any);
    }
    McEstimate::from_counts(lost, samples, seed)
}

/// Monte Carlo estimate of the expected obtained fraction of `sub`'s views.
pub fn mc_expected_alpha(
    cfg: &SynthesisConfig,
    user: &UserChannelState,
    plan: &TransmissionPlan,
    sub: &Subscription,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    let total = cfg.total_views();
    for &v in sub.views() {
        cfg.check_view(v)?;
    }
    let mut rng = oracle_rng(seed);
    let mut received = vec![false; total + 1];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        sample_receptions(&mut rng, user, plan, &mut received);
        let got = sub.views().iter().filter(|&&v| obtained(&received, cfg.dibr_range(), v)).count();
        let frac = got as f64 / sub.views().len() as f64;
        sum += frac;
        sum_sq += frac * frac;
    }
    McEstimate::from_moments(sum, sum_sq, samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Link, UserId};

    const L0: Link = Link::new(0, 0);

    fn flat(total: usize, p: f64) -> (UserChannelState, TransmissionPlan) {
        let user = UserChannelState::new(UserId(1), [(L0, p)]).unwrap();
        let mut plan = TransmissionPlan::new(total);
        for v in 1..=total {
            plan.set(v, L0, 1).unwrap();
        }
        (user, plan)
    }

    #[test]
    fn enumeration_three_views() {
        let cfg = SynthesisConfig::new(3, 2).unwrap();
        let (user, plan) = flat(3, 0.5);
        let p = enumerate_failure_prob(&cfg, &user, &plan, 2).unwrap();
        assert!((p - 0.375).abs() < 1e-15);
    }

    #[test]
    fn enumeration_boundary_is_direct_product() {
        let cfg = SynthesisConfig::new(4, 3).unwrap();
        let user = UserChannelState::new(UserId(1), [(L0, 0.3), (Link::new(1, 0), 0.6)]).unwrap();
        let plan = TransmissionPlan::new(4)
            .with(1, L0, 2)
            .unwrap()
            .with(1, Link::new(1, 0), 1)
            .unwrap()
            .with(2, L0, 1)
            .unwrap();
        let p = enumerate_failure_prob(&cfg, &user, &plan, 1).unwrap();
        assert!((p - 0.09 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn enumeration_two_views_no_left_neighbour() {
        let cfg = SynthesisConfig::new(2, 2).unwrap();
        let (user, plan) = flat(2, 0.4);
        assert!((enumerate_failure_prob(&cfg, &user, &plan, 1).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn enumeration_limit() {
        let cfg = SynthesisConfig::new(2, 2).unwrap();
        let user = UserChannelState::new(UserId(1), [(L0, 0.4)]).unwrap();
        let plan = TransmissionPlan::new(2).with(1, L0, 25).unwrap();
        assert!(matches!(
            enumerate_failure_prob(&cfg, &user, &plan, 1),
            Err(Error::OutcomeSpaceTooLarge { broadcasts: 25, .. })
        ));
    }

    #[test]
    fn sequence_rule_matches_pointwise_rule() {
        let mut rng = oracle_rng(11);
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let range = rng.random_range(1..5);
            let received: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            let seq = obtained_sequence(&received, range);
            let mut padded = vec![false];
            padded.extend(&received);
            for v in 1..=n {
                assert_eq!(seq[v - 1], obtained(&padded, range, v));
            }
        }
    }

    #[test]
    fn uniform_degenerate_losses() {
        let e = mc_alpha_uniform(0.0, 3, 10_000, 0.4, 1).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.std_error, 0.0);
        let e = mc_alpha_uniform(1.0, 3, 10_000, 0.4, 1).unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn uniform_reference_point() {
        let e = mc_alpha_uniform(0.5, 2, 100_000, 0.3, 7).unwrap();
        assert!((e.mean - 0.625).abs() < 0.01, "{e:?}");
    }

    #[test]
    fn deterministic_given_seed() {
        let a = mc_alpha_uniform(0.3, 3, 20_000, 0.5, 99).unwrap();
        let b = mc_alpha_uniform(0.3, 3, 20_000, 0.5, 99).unwrap();
        assert_eq!(a, b);
        let c = mc_alpha_uniform(0.3, 3, 20_000, 0.5, 100).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn zipf_reductions() {
        let z = ZipfPeriodicSubscription::new(4, 1.0, 1.0).unwrap();
        assert_eq!(mc_alpha_zipf_consecutive(1.0, 2, &z, 10_000, 3).unwrap().mean, 1.0);

        let flat = ZipfPeriodicSubscription::new(1, 0.0, 1.0).unwrap();
        let a = mc_alpha_zipf_consecutive(0.6, 2, &flat, 200_000, 5).unwrap();
        let b = mc_alpha_uniform(0.4, 2, 200_000, 1.0, 6).unwrap();
        assert!((a.mean - b.mean).abs() < 4.0 * (a.std_error + b.std_error), "{a:?} {b:?}");
    }

    #[test]
    fn spaced_reductions() {
        let a = mc_alpha_spaced(0.3, 3, 1, 200_000, 5).unwrap();
        let b = mc_alpha_uniform(0.3, 3, 200_000, 1.0, 6).unwrap();
        assert!((a.mean - b.mean).abs() < 4.0 * (a.std_error + b.std_error));
        assert_eq!(mc_alpha_spaced(0.0, 3, 3, 10_000, 1).unwrap().mean, 1.0);
        assert!(mc_alpha_spaced(0.2, 2, 3, 100, 1).is_err());
        let e = mc_alpha_spaced(0.5, 2, 2, 100_000, 8).unwrap();
        assert!((e.mean - 0.375).abs() < 0.01, "{e:?}");
    }

    #[test]
    fn standard_error_shrinks_with_samples() {
        let small = mc_alpha_uniform(0.4, 2, 20_000, 1.0, 1).unwrap();
        let large = mc_alpha_uniform(0.4, 2, 80_000, 1.0, 1).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }
}
