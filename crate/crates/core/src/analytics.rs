//! Closed forms for the view-failure probability and the obtained-view
//! fraction `alpha` under direct reception plus DIBR synthesis.
//!
//! A view `d` that is not received directly can still be synthesized from a
//! received left view `a < d` and a received right view `b > d` when
//! `b - a <= R`.

use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::model::{SynthesisConfig, Subscription, TransmissionPlan, UserChannelState, View};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaKind {
    ExactExpectation,
    Asymptotic,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub value: f64,
    pub kind: AlphaKind,
}

impl AlphaResult {
    fn asymptotic(value: f64) -> Self {
        AlphaResult { value: value.clamp(0.0, 1.0), kind: AlphaKind::Asymptotic }
    }
}

/// Failure probability of `desired` given per-view combined losses
/// (`losses[v - 1]` is the probability view `v` is lost).
///
/// `L(d)` times the probability that no feasible left/right pair is received,
/// where the latter is the sum over the disjoint events `B_k`:
/// `B_0`: every left view within `R - 1` is lost. `B_k`: the nearest
/// received left view is `d - k` and every right view up to `d - k + R` is lost.
pub fn failure_from_view_losses(losses: &[f64], dibr_range: usize, desired: View) -> f64 {
    let total = losses.len();
    debug_assert!((1..=total).contains(&desired));
    let loss = |v: View| losses[v - 1];
    let direct = loss(desired);
    if desired == 1 || desired == total || dibr_range == 1 {
        return direct;
    }

    // B_0: every usable left view lost.
    let b0: f64 = (1..=(dibr_range - 1).min(desired - 1)).map(|q| loss(desired - q)).product();

    let mut no_pair = b0;
    // Probability that views d-1 .. d-(k-1) are all lost.
    let mut left_lost = 1.0;
    for k in 1..dibr_range {
        if k >= desired {
            break;
        }
        let right_reach = (dibr_range - k).min(total - desired);
        let right_lost: f64 = (1..=right_reach).map(|l| loss(desired + l)).product();
        no_pair += (1.0 - loss(desired - k)) * left_lost * right_lost;
        left_lost *= loss(desired - k);
    }
    direct * no_pair
}

/// Probability that `user` neither receives nor can synthesize `desired`.
pub fn view_failure_prob(
    cfg: &SynthesisConfig,
    user: &UserChannelState,
    plan: &TransmissionPlan,
    desired: View,
) -> Result<f64> {
    cfg.check_view(desired)?;
    check_plan(cfg, plan)?;
    let losses = plan.view_losses(user);
    Ok(failure_from_view_losses(&losses, cfg.dibr_range(), desired))
}

fn check_plan(cfg: &SynthesisConfig, plan: &TransmissionPlan) -> Result<()> {
    if plan.total_views() != cfg.total_views() {
        return Err(Error::InvalidSynthesis(format!(
            "plan covers {} views but the config has {}",
            plan.total_views(),
            cfg.total_views()
        )));
    }
    Ok(())
}

/// Expected fraction of the subscribed views the user obtains: the mean of
/// `1 - P_fail(k)` over `k` in `K_i`.
pub fn expected_alpha_exact(
    cfg: &SynthesisConfig,
    user: &UserChannelState,
    plan: &TransmissionPlan,
    sub: &Subscription,
) -> Result<AlphaResult> {
    check_plan(cfg, plan)?;
    let losses = plan.view_losses(user);
    let mut obtained = 0.0;
    for &k in sub.views() {
        cfg.check_view(k)?;
        obtained += 1.0 - failure_from_view_losses(&losses, cfg.dibr_range(), k);
    }
    Ok(AlphaResult {
        value: obtained / sub.views().len() as f64,
        kind: AlphaKind::ExactExpectation,
    })
}

/// Limit of `alpha` when every view is multicast and each is lost with
/// probability `loss_p`: `(1-p) { sum_{k=1}^R k (1-p) p^{k-1} + p^R }`.
pub fn alpha_asymptotic_uniform(loss_p: f64, dibr_range: usize) -> Result<AlphaResult> {
    alpha_asymptotic_spaced(loss_p, dibr_range, 1)
}

/// Limit of `alpha` when only one view in every `spacing` views is multicast.
pub fn alpha_asymptotic_spaced(loss_p: f64, dibr_range: usize, spacing: usize) -> Result<AlphaResult> {
    let p = check_probability(loss_p)?;
    if dibr_range == 0 {
        return Err(Error::InvalidSynthesis("dibr_range must be at least 1".into()));
    }
    if spacing == 0 || spacing > dibr_range {
        return Err(Error::InvalidSynthesis(format!(
            "spacing {spacing} must lie in 1..={dibr_range}"
        )));
    }
    let hops = dibr_range / spacing;
    let q = 1.0 - p;
    let step = spacing as f64;
    let gap_reward: f64 = (1..=hops).map(|k| step * k as f64 * q * p.powi(k as i32 - 1)).sum();
    let value = q * (gap_reward + p.powi(hops as i32)) / step;
    Ok(AlphaResult::asymptotic(value))
}

/// Periodic Zipf subscription: view `k` is subscribed independently with
/// probability `c / phase(k)^s`, `phase(k) = ((k - 1) mod m) + 1`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfPeriodicSubscription {
    period: usize,
    exponent: f64,
    normalizer: f64,
}

impl ZipfPeriodicSubscription {
    pub fn new(period: usize, exponent: f64, normalizer: f64) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidZipf("period must be at least 1".into()));
        }
        if !(exponent.is_finite() && exponent >= 0.0) {
            return Err(Error::InvalidZipf(format!("exponent {exponent} must be non-negative")));
        }
        // Weights decrease with the phase, so phase 1 carries the largest one.
        if !(normalizer > 0.0 && normalizer <= 1.0) {
            return Err(Error::InvalidZipf(format!(
                "normalizer {normalizer} must lie in (0, 1] so every c/k^s is a probability"
            )));
        }
        Ok(ZipfPeriodicSubscription { period, exponent, normalizer })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Subscription probability of phase `j` in `1..=m`.
    pub fn weight(&self, phase: usize) -> f64 {
        self.normalizer / (phase as f64).powf(self.exponent)
    }

    pub fn phase_of(&self, view: View) -> usize {
        (view - 1) % self.period + 1
    }

    /// Expected subscriptions per period, `sum_{l=1}^m c/l^s`.
    pub fn period_mass(&self) -> f64 {
        (1..=self.period).map(|l| self.weight(l)).sum()
    }

    /// Expected number of subscribed views among the `x` positions that
    /// follow a view at phase `j`: the remainder of the current period, the
    /// whole periods, then the leading part of the last period.
    pub fn window_mass(&self, phase: usize, x: usize) -> f64 {
        let m = self.period;
        let to_period_end = m - phase;
        let head: f64 = (1..=x.min(to_period_end)).map(|l| self.weight(phase + l)).sum();
        if x <= to_period_end {
            return head;
        }
        let rest = x - to_period_end;
        let full = (rest / m) as f64 * self.period_mass();
        let tail: f64 = (1..=rest % m).map(|l| self.weight(l)).sum();
        head + full + tail
    }
}

/// Limit of the obtained fraction of subscribed views under the periodic Zipf
/// subscription, with `success_p` the per-view reception probability.
///
/// Markov renewal reward over the phase of each received view: a gap of
/// `x <= R` views to the next received view earns the subscription mass of
/// all `x` positions; a longer gap earns only the received endpoint. The
/// phase chain is uniform on `1..=m`.
pub fn alpha_asymptotic_zipf_consecutive(
    success_p: f64,
    dibr_range: usize,
    zipf: &ZipfPeriodicSubscription,
) -> Result<AlphaResult> {
    let (window, endpoint) = zipf_reward_terms(success_p, dibr_range, zipf)?;
    Ok(AlphaResult::asymptotic(success_p * (window + endpoint) / zipf.period_mass()))
}

/// The same limit with the reward of gaps longer than `R` set to zero, i.e.
/// counting only views inside synthesizable gaps. Kept to measure how much
/// the endpoint term contributes.
pub fn zipf_window_reward_only(
    success_p: f64,
    dibr_range: usize,
    zipf: &ZipfPeriodicSubscription,
) -> Result<AlphaResult> {
    let (window, _) = zipf_reward_terms(success_p, dibr_range, zipf)?;
    Ok(AlphaResult::asymptotic(success_p * window / zipf.period_mass()))
}

fn zipf_reward_terms(success_p: f64, dibr_range: usize, zipf: &ZipfPeriodicSubscription) -> Result<(f64, f64)> {
    let p = check_probability(success_p)?;
    if dibr_range == 0 {
        return Err(Error::InvalidSynthesis("dibr_range must be at least 1".into()));
    }
    let m = zipf.period();
    let miss = 1.0 - p;
    let gap_prob = |x: usize| p * miss.powi(x as i32 - 1);

    let mut window = 0.0;
    for j in 1..=m {
        for x in 1..=dibr_range {
            window += zipf.window_mass(j, x) * gap_prob(x);
        }
    }

    // Gaps beyond R: sum_{x > R} p (1-p)^{x-1} w(phase(j + x)). The phase
    // repeats every m, so the series folds into m terms over 1 - (1-p)^m.
    let cycle = 1.0 - miss.powi(m as i32);
    let mut endpoint = 0.0;
    if cycle > 0.0 {
        for j in 1..=m {
            for t in 0..m {
                let x = dibr_range + 1 + t;
                endpoint += zipf.weight((j - 1 + x) % m + 1) * gap_prob(x);
            }
        }
        endpoint /= cycle;
    }
    Ok((window, endpoint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Link, UserId};

    const L0: Link = Link::new(0, 0);

    fn flat_setup(total: usize, p: f64, n: u32) -> (UserChannelState, TransmissionPlan) {
        let user = UserChannelState::new(UserId(1), [(L0, p)]).unwrap();
        let mut plan = TransmissionPlan::new(total);
        for v in 1..=total {
            plan.set(v, L0, n).unwrap();
        }
        (user, plan)
    }

    #[test]
    fn boundary_view_is_direct_loss() {
        let cfg = SynthesisConfig::new(5, 3).unwrap();
        let (user, plan) = flat_setup(5, 0.1, 2);
        let p = view_failure_prob(&cfg, &user, &plan, 1).unwrap();
        assert!((p - 0.01).abs() < 1e-15);
        let p = view_failure_prob(&cfg, &user, &plan, 5).unwrap();
        assert!((p - 0.01).abs() < 1e-15);
    }

    #[test]
    fn three_views_half_loss() {
        let cfg = SynthesisConfig::new(3, 2).unwrap();
        let (user, plan) = flat_setup(3, 0.5, 1);
        let p = view_failure_prob(&cfg, &user, &plan, 2).unwrap();
        assert!((p - 0.375).abs() < 1e-15);
    }

    #[test]
    fn certain_direct_reception() {
        let cfg = SynthesisConfig::new(6, 3).unwrap();
        let user = UserChannelState::new(UserId(1), [(L0, 0.0)]).unwrap();
        let plan = TransmissionPlan::new(6).with(4, L0, 1).unwrap();
        assert_eq!(view_failure_prob(&cfg, &user, &plan, 4).unwrap(), 0.0);
    }

    #[test]
    fn synthesis_only_from_neighbours() {
        // View 8 absent, views 7 and 9 present at loss 0.1 each.
        let cfg = SynthesisConfig::new(16, 2).unwrap();
        let user = UserChannelState::new(UserId(1), [(L0, 0.1)]).unwrap();
        let plan = TransmissionPlan::new(16).with(7, L0, 1).unwrap().with(9, L0, 1).unwrap();
        let p = view_failure_prob(&cfg, &user, &plan, 8).unwrap();
        assert!((p - 0.19).abs() < 1e-15);
    }

    #[test]
    fn range_one_disables_synthesis() {
        let cfg = SynthesisConfig::new(5, 1).unwrap();
        let (user, plan) = flat_setup(5, 0.3, 1);
        assert!((view_failure_prob(&cfg, &user, &plan, 3).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn failure_rejects_bad_view() {
        let cfg = SynthesisConfig::new(5, 2).unwrap();
        let (user, plan) = flat_setup(5, 0.3, 1);
        assert!(view_failure_prob(&cfg, &user, &plan, 6).is_err());
        assert!(view_failure_prob(&cfg, &user, &plan, 0).is_err());
    }

    #[test]
    fn expected_alpha_examples() {
        let cfg = SynthesisConfig::new(3, 2).unwrap();
        let (user, plan) = flat_setup(3, 0.5, 1);
        let sub = Subscription::single(UserId(1), 2, 3).unwrap();
        let a = expected_alpha_exact(&cfg, &user, &plan, &sub).unwrap();
        assert!((a.value - 0.625).abs() < 1e-15);
        assert_eq!(a.kind, AlphaKind::ExactExpectation);

        let (user, plan) = flat_setup(3, 0.0, 1);
        let all = Subscription::new(UserId(1), [1, 2, 3], 3).unwrap();
        assert_eq!(expected_alpha_exact(&cfg, &user, &plan, &all).unwrap().value, 1.0);

        let cfg = SynthesisConfig::new(6, 3).unwrap();
        let user = UserChannelState::new(UserId(1), [(L0, 0.0)]).unwrap();
        let plan = TransmissionPlan::new(6).with(3, L0, 1).unwrap();
        let edges = Subscription::new(UserId(1), [1, 6], 6).unwrap();
        assert_eq!(expected_alpha_exact(&cfg, &user, &plan, &edges).unwrap().value, 0.0);
    }

    #[test]
    fn uniform_examples() {
        for p in [0.0, 0.2, 0.7, 1.0] {
            let a = alpha_asymptotic_uniform(p, 1).unwrap().value;
            assert!((a - (1.0 - p)).abs() < 1e-15);
        }
        for r in 1..6 {
            assert_eq!(alpha_asymptotic_uniform(0.0, r).unwrap().value, 1.0);
        }
        assert!((alpha_asymptotic_uniform(0.5, 2).unwrap().value - 0.625).abs() < 1e-15);
        assert!(alpha_asymptotic_uniform(1.5, 2).is_err());
    }

    #[test]
    fn spaced_examples() {
        for p in [0.0, 0.1, 0.45, 0.9] {
            for r in 1..6 {
                let a = alpha_asymptotic_spaced(p, r, 1).unwrap().value;
                let b = alpha_asymptotic_uniform(p, r).unwrap().value;
                assert_eq!(a, b);
            }
        }
        assert!((alpha_asymptotic_spaced(0.5, 2, 2).unwrap().value - 0.375).abs() < 1e-15);
        for r in 1..6 {
            for s in 1..=r {
                assert!((alpha_asymptotic_spaced(0.0, r, s).unwrap().value - 1.0).abs() < 1e-15);
            }
        }
        assert!(alpha_asymptotic_spaced(0.5, 2, 3).is_err());
    }

    #[test]
    fn zipf_full_subscription_always_received() {
        for m in 1..6 {
            let z = ZipfPeriodicSubscription::new(m, 0.0, 1.0).unwrap();
            for r in 1..4 {
                let a = alpha_asymptotic_zipf_consecutive(1.0, r, &z).unwrap().value;
                assert!((a - 1.0).abs() < 1e-12, "m={m} r={r} a={a}");
            }
        }
    }

    #[test]
    fn zipf_reduces_to_uniform() {
        let z = ZipfPeriodicSubscription::new(1, 0.0, 1.0).unwrap();
        for p in [0.05, 0.3, 0.5, 0.8, 1.0] {
            for r in 1..6 {
                let a = alpha_asymptotic_zipf_consecutive(p, r, &z).unwrap().value;
                let b = alpha_asymptotic_uniform(1.0 - p, r).unwrap().value;
                assert!((a - b).abs() < 1e-12, "p={p} r={r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zipf_nothing_received() {
        let z = ZipfPeriodicSubscription::new(5, 2.0, 1.0).unwrap();
        assert_eq!(alpha_asymptotic_zipf_consecutive(0.0, 3, &z).unwrap().value, 0.0);
    }

    #[test]
    fn zipf_window_mass_matches_direct_count() {
        let z = ZipfPeriodicSubscription::new(5, 2.0, 0.8).unwrap();
        for j in 1..=5 {
            for x in 0..17 {
                let direct: f64 = (1..=x).map(|l| z.weight(z.phase_of(j + l))).sum();
                assert!((z.window_mass(j, x) - direct).abs() < 1e-12, "j={j} x={x}");
            }
        }
    }

    #[test]
    fn zipf_validation() {
        assert!(ZipfPeriodicSubscription::new(0, 1.0, 1.0).is_err());
        assert!(ZipfPeriodicSubscription::new(3, -1.0, 1.0).is_err());
        assert!(ZipfPeriodicSubscription::new(3, 1.0, 1.5).is_err());
        assert!(ZipfPeriodicSubscription::new(3, 1.0, 0.0).is_err());
    }

    #[test]
    fn zipf_endpoint_term_is_not_negligible() {
        let z = ZipfPeriodicSubscription::new(1, 0.0, 1.0).unwrap();
        let full = alpha_asymptotic_zipf_consecutive(0.3, 1, &z).unwrap().value;
        let window = zipf_window_reward_only(0.3, 1, &z).unwrap().value;
        // p (1-p)^R = 0.3 * 0.7
        assert!((full - window - 0.21).abs() < 1e-12);
    }
}
