//! Core domain types shared by every other module.
//!
//! Views are 1-based: a video carries views `1..=M`, and views `1` and `M`
//! sit on the boundary where synthesis from a left and a right view is
//! impossible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};

/// 1-based view index.
pub type View = usize;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A `(channel, rate index)` pair the AP can broadcast on.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub channel: u8,
    pub rate: u8,
}

impl Link {
    pub const fn new(channel: u8, rate: u8) -> Self {
        Link { channel, rate }
    }
}

/// Number of views, DIBR quality constraint `R` and delivery spacing.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    total_views: usize,
    dibr_range: usize,
    spacing: usize,
}

impl SynthesisConfig {
    pub fn new(total_views: usize, dibr_range: usize) -> Result<Self> {
        Self::with_spacing(total_views, dibr_range, 1)
    }

    pub fn with_spacing(total_views: usize, dibr_range: usize, spacing: usize) -> Result<Self> {
        if total_views == 0 {
            return Err(Error::InvalidSynthesis("total_views must be at least 1".into()));
        }
        if dibr_range == 0 {
            return Err(Error::InvalidSynthesis("dibr_range must be at least 1".into()));
        }
        if spacing == 0 || spacing > dibr_range {
            return Err(Error::InvalidSynthesis(format!(
                "spacing {spacing} must lie in 1..={dibr_range}"
            )));
        }
        Ok(SynthesisConfig { total_views, dibr_range, spacing })
    }

    pub fn total_views(&self) -> usize {
        self.total_views
    }

    pub fn dibr_range(&self) -> usize {
        self.dibr_range
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn check_view(&self, view: View) -> Result<View> {
        check_view(view, self.total_views)
    }
}

pub(crate) fn check_view(view: View, total_views: usize) -> Result<View> {
    if (1..=total_views).contains(&view) {
        Ok(view)
    } else {
        Err(Error::ViewOutOfRange { view, total_views })
    }
}

/// Per-user loss probability for every `(channel, rate)` the user can receive.
///
/// The key set is `C_i x D_i`; links absent from the map cannot be received
/// by the user at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserChannelState {
    user: UserId,
    loss: BTreeMap<Link, f64>,
}

impl UserChannelState {
    pub fn new(user: UserId, loss: impl IntoIterator<Item = (Link, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (link, p) in loss {
            check_probability(p)?;
            map.insert(link, p);
        }
        if map.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "user {user} has an empty channel/rate set"
            )));
        }
        Ok(UserChannelState { user, loss: map })
    }

    /// Same loss `p` on every link of a `channels x rates` grid.
    pub fn uniform(user: UserId, channels: u8, rates: u8, p: f64) -> Result<Self> {
        let links = (0..channels).flat_map(|c| (0..rates).map(move |r| Link::new(c, r)));
        Self::new(user, links.map(|l| (l, p)))
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn loss_on(&self, link: Link) -> Option<f64> {
        self.loss.get(&link).copied()
    }

    pub fn can_receive(&self, link: Link) -> bool {
        self.loss.contains_key(&link)
    }

    pub fn links(&self) -> impl Iterator<Item = (Link, f64)> + '_ {
        self.loss.iter().map(|(l, p)| (*l, *p))
    }

    pub fn channels(&self) -> BTreeSet<u8> {
        self.loss.keys().map(|l| l.channel).collect()
    }

    pub fn rates(&self) -> BTreeSet<u8> {
        self.loss.keys().map(|l| l.rate).collect()
    }
}

/// Broadcast counts `n_{j,c,r}` for one frame time. Absent entries are zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransmissionPlan {
    total_views: usize,
    counts: BTreeMap<(View, Link), u32>,
}

impl TransmissionPlan {
    pub fn new(total_views: usize) -> Self {
        TransmissionPlan { total_views, counts: BTreeMap::new() }
    }

    pub fn total_views(&self) -> usize {
        self.total_views
    }

    pub fn set(&mut self, view: View, link: Link, count: u32) -> Result<()> {
        check_view(view, self.total_views)?;
        if count == 0 {
            self.counts.remove(&(view, link));
        } else {
            self.counts.insert((view, link), count);
        }
        Ok(())
    }

    pub fn add(&mut self, view: View, link: Link, count: u32) -> Result<()> {
        let n = self.count(view, link) + count;
        self.set(view, link, n)
    }

    pub fn with(mut self, view: View, link: Link, count: u32) -> Result<Self> {
        self.set(view, link, count)?;
        Ok(self)
    }

    pub fn count(&self, view: View, link: Link) -> u32 {
        self.counts.get(&(view, link)).copied().unwrap_or(0)
    }

    pub fn is_transmitted(&self, view: View) -> bool {
        self.counts.range((view, Link::new(0, 0))..).next().is_some_and(|((v, _), _)| *v == view)
    }

    pub fn iter(&self) -> impl Iterator<Item = (View, Link, u32)> + '_ {
        self.counts.iter().map(|((v, l), n)| (*v, *l, *n))
    }

    pub fn total_broadcasts(&self) -> u64 {
        self.counts.values().map(|&n| u64::from(n)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Combined loss probability of every view for `user`, indexed `view - 1`.
    pub fn view_losses(&self, user: &UserChannelState) -> Vec<f64> {
        let mut losses = vec![1.0; self.total_views];
        for ((view, link), n) in &self.counts {
            if let Some(p) = user.loss_on(*link) {
                losses[view - 1] *= p.powi(*n as i32);
            }
        }
        losses
    }
}

/// `p^AP_{c,r}(n)`: how many times the AP broadcasts a view on each link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTransmissionDistribution {
    probs: BTreeMap<Link, Vec<f64>>,
}

impl ApTransmissionDistribution {
    /// `probs[link][n]` is the probability of exactly `n` broadcasts.
    pub fn new(probs: impl IntoIterator<Item = (Link, Vec<f64>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (link, dist) in probs {
            for &p in &dist {
                check_probability(p)?;
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "count distribution on channel {} rate {} sums to {total}",
                    link.channel, link.rate
                )));
            }
            map.insert(link, dist);
        }
        Ok(ApTransmissionDistribution { probs: map })
    }

    pub fn deterministic(link: Link, count: usize) -> Result<Self> {
        let mut dist = vec![0.0; count + 1];
        dist[count] = 1.0;
        Self::new([(link, dist)])
    }

    pub fn get(&self, link: Link) -> Option<&[f64]> {
        self.probs.get(&link).map(Vec::as_slice)
    }

    pub fn links(&self) -> impl Iterator<Item = (Link, &[f64])> + '_ {
        self.probs.iter().map(|(l, d)| (*l, d.as_slice()))
    }
}

/// Desired views `K_i` of one user, kept sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    user: UserId,
    views: Vec<View>,
}

impl Subscription {
    pub fn new(user: UserId, views: impl IntoIterator<Item = View>, total_views: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for v in views {
            check_view(v, total_views)?;
            if !seen.insert(v) {
                return Err(Error::InvalidArgument(format!("view {v} listed twice")));
            }
        }
        if seen.is_empty() {
            return Err(Error::InvalidArgument("subscription has no views".into()));
        }
        Ok(Subscription { user, views: seen.into_iter().collect() })
    }

    pub fn single(user: UserId, view: View, total_views: usize) -> Result<Self> {
        Self::new(user, [view], total_views)
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn contains(&self, view: View) -> bool {
        self.views.binary_search(&view).is_ok()
    }
}

/// Probability that `user` misses every broadcast of `view`:
/// the product of `p^n` over the user's links. An untransmitted view is lost
/// with probability 1.
pub fn combined_view_loss_prob(user: &UserChannelState, plan: &TransmissionPlan, view: View) -> Result<f64> {
    check_view(view, plan.total_views())?;
    let loss = plan
        .iter()
        .filter(|(v, _, _)| *v == view)
        .filter_map(|(_, link, n)| user.loss_on(link).map(|p| p.powi(n as i32)))
        .product();
    Ok(loss)
}

/// View loss when the AP picks its broadcast count per link at random:
/// `prod_{c,r} sum_n p^AP_{c,r}(n) p_{i,c,r}^n`.
pub fn combined_loss_prob_randomized(user: &UserChannelState, ap: &ApTransmissionDistribution) -> Result<f64> {
    let mut loss = 1.0;
    for (link, p) in user.links() {
        let dist = ap.get(link).ok_or(Error::MissingLink(link))?;
        let per_link: f64 = dist.iter().enumerate().map(|(n, q)| q * p.powi(n as i32)).sum();
        loss *= per_link;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    const L0: Link = Link::new(0, 0);
    const L1: Link = Link::new(0, 1);

    fn user(losses: &[(Link, f64)]) -> UserChannelState {
        UserChannelState::new(UserId(1), losses.iter().copied()).unwrap()
    }

    #[test]
    fn single_link_two_broadcasts() {
        let u = user(&[(L0, 0.1)]);
        let plan = TransmissionPlan::new(4).with(2, L0, 2).unwrap();
        let p = combined_view_loss_prob(&u, &plan, 2).unwrap();
        assert!((p - 0.01).abs() < 1e-15);
    }

    #[test]
    fn untransmitted_view_is_always_lost() {
        let u = user(&[(L0, 0.1)]);
        let plan = TransmissionPlan::new(4).with(2, L0, 2).unwrap();
        assert_eq!(combined_view_loss_prob(&u, &plan, 3).unwrap(), 1.0);
    }

    #[test]
    fn two_links_multiply() {
        let u = user(&[(L0, 0.2), (L1, 0.5)]);
        let plan = TransmissionPlan::new(4).with(1, L0, 1).unwrap().with(1, L1, 3).unwrap();
        let p = combined_view_loss_prob(&u, &plan, 1).unwrap();
        assert!((p - 0.025).abs() < 1e-15);
    }

    #[test]
    fn view_out_of_range() {
        let u = user(&[(L0, 0.2)]);
        let plan = TransmissionPlan::new(4);
        assert_eq!(
            combined_view_loss_prob(&u, &plan, 5),
            Err(Error::ViewOutOfRange { view: 5, total_views: 4 })
        );
        assert!(combined_view_loss_prob(&u, &plan, 0).is_err());
    }

    #[test]
    fn broadcasts_on_unreachable_links_do_not_count() {
        let u = user(&[(L0, 0.2)]);
        let plan = TransmissionPlan::new(2).with(1, L1, 5).unwrap();
        assert_eq!(combined_view_loss_prob(&u, &plan, 1).unwrap(), 1.0);
    }

    #[test]
    fn randomized_degenerate_distribution() {
        let u = user(&[(L0, 0.3)]);
        let ap = ApTransmissionDistribution::deterministic(L0, 1).unwrap();
        assert!((combined_loss_prob_randomized(&u, &ap).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn randomized_mixture() {
        let u = user(&[(L0, 0.5)]);
        let ap = ApTransmissionDistribution::new([(L0, vec![0.5, 0.0, 0.5])]).unwrap();
        assert!((combined_loss_prob_randomized(&u, &ap).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn randomized_guaranteed_reception() {
        let u = user(&[(L0, 0.0)]);
        let ap = ApTransmissionDistribution::new([(L0, vec![0.0, 0.3, 0.7])]).unwrap();
        assert_eq!(combined_loss_prob_randomized(&u, &ap).unwrap(), 0.0);
    }

    #[test]
    fn randomized_missing_link() {
        let u = user(&[(L0, 0.5), (L1, 0.5)]);
        let ap = ApTransmissionDistribution::deterministic(L0, 1).unwrap();
        assert_eq!(combined_loss_prob_randomized(&u, &ap), Err(Error::MissingLink(L1)));
    }

    #[test]
    fn ap_distribution_must_sum_to_one() {
        assert!(ApTransmissionDistribution::new([(L0, vec![0.5, 0.4])]).is_err());
    }

    #[test]
    fn synthesis_config_validation() {
        assert!(SynthesisConfig::new(0, 1).is_err());
        assert!(SynthesisConfig::new(4, 0).is_err());
        assert!(SynthesisConfig::with_spacing(4, 2, 3).is_err());
        assert!(SynthesisConfig::with_spacing(4, 2, 2).is_ok());
    }

    #[test]
    fn subscription_validation() {
        assert!(Subscription::new(UserId(1), [1, 1], 4).is_err());
        assert!(Subscription::new(UserId(1), [5], 4).is_err());
        assert!(Subscription::new(UserId(1), [], 4).is_err());
        let s = Subscription::new(UserId(1), [3, 1], 4).unwrap();
        assert_eq!(s.views(), &[1, 3]);
    }

    #[test]
    fn user_state_rejects_bad_probability() {
        assert!(UserChannelState::new(UserId(1), [(L0, 1.5)]).is_err());
        assert!(UserChannelState::new(UserId(1), []).is_err());
    }

    #[test]
    fn transmitted_lookup() {
        let plan = TransmissionPlan::new(5).with(3, Link::new(1, 4), 1).unwrap();
        assert!(plan.is_transmitted(3));
        assert!(!plan.is_transmitted(2));
        assert!(!plan.is_transmitted(4));
    }
}
