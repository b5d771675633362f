//! MVGMP: the AP-side ViewTable and the client-side view selection.
//!
//! The ViewTable is a single-writer state machine. Every mutation goes
//! through [`ViewTable::handle_join`], [`ViewTable::handle_leave`],
//! [`ViewTable::refresh`] or [`ViewTable::expire_soft_state`], and after each
//! of them every entry has at least one subscriber.
//!
//! Clients decide what to receive from a snapshot of the table with
//! [`Protocol::select_views_on_join`], [`Protocol::change_view`] and
//! [`Protocol::client_reorganize_on_leave`]; they never mutate it directly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analytics::failure_from_view_losses;
use crate::channel::{airtime_of, Airtime};
use crate::error::{check_probability, Error, Result};
use crate::model::{Link, Subscription, SynthesisConfig, TransmissionPlan, UserChannelState, UserId, View};

/// One `(view, channel, rate)` triple of the ViewTable.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryKey {
    pub view: View,
    pub link: Link,
}

impl EntryKey {
    pub const fn new(view: View, channel: u8, rate: u8) -> Self {
        EntryKey { view, link: Link::new(channel, rate) }
    }
}

impl fmt::Display for EntryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.view, self.link.channel, self.link.rate)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriberRecord {
    /// Frame of the last Join (or refresh) from this subscriber.
    pub last_refresh: u64,
    /// Broadcasts per frame this subscriber relies on.
    pub requested_tx: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewTableEntry {
    pub key: EntryKey,
    pub multicast_address: u64,
    pub subscribers: BTreeMap<UserId, SubscriberRecord>,
}

impl ViewTableEntry {
    /// The entry is broadcast as often as its most demanding subscriber asked.
    pub fn tx_count(&self) -> u32 {
        self.subscribers.values().map(|s| s.requested_tx).max().unwrap_or(0)
    }

    pub fn has_subscriber(&self, user: UserId) -> bool {
        self.subscribers.contains_key(&user)
    }

    fn only_subscriber_is(&self, user: UserId) -> bool {
        self.subscribers.len() == 1 && self.has_subscriber(user)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub key: EntryKey,
    pub tx_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinMessage {
    user: UserId,
    requests: Vec<JoinRequest>,
}

impl JoinMessage {
    pub fn new(user: UserId, requests: impl IntoIterator<Item = JoinRequest>) -> Result<Self> {
        let mut by_key = BTreeMap::new();
        for r in requests {
            if r.tx_count == 0 {
                return Err(Error::InvalidMessage(format!("join for {} asks for zero broadcasts", r.key)));
            }
            by_key.insert(r.key, r);
        }
        if by_key.is_empty() {
            return Err(Error::InvalidMessage("join message carries no views".into()));
        }
        Ok(JoinMessage { user, requests: by_key.into_values().collect() })
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn requests(&self) -> &[JoinRequest] {
        &self.requests
    }

    pub fn keys(&self) -> impl Iterator<Item = EntryKey> + '_ {
        self.requests.iter().map(|r| r.key)
    }
}

impl fmt::Display for JoinMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "JOIN user={} views=", self.user)?;
        write_keys(f, self.keys())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveMessage {
    user: UserId,
    released: BTreeSet<EntryKey>,
}

impl LeaveMessage {
    pub fn new(user: UserId, released: impl IntoIterator<Item = EntryKey>) -> Result<Self> {
        let released: BTreeSet<_> = released.into_iter().collect();
        if released.is_empty() {
            return Err(Error::InvalidMessage("leave message carries no views".into()));
        }
        Ok(LeaveMessage { user, released })
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn released(&self) -> &BTreeSet<EntryKey> {
        &self.released
    }
}

impl fmt::Display for LeaveMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LEAVE user={} views=", self.user)?;
        write_keys(f, self.released.iter().copied())
    }
}

fn write_keys(f: &mut fmt::Formatter<'_>, keys: impl Iterator<Item = EntryKey>) -> fmt::Result {
    for (i, k) in keys.enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{k}")?;
    }
    Ok(())
}

/// The AP's record of multicast views, their links and subscribers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewTable {
    total_views: usize,
    num_channels: u8,
    num_rates: u8,
    entries: BTreeMap<EntryKey, ViewTableEntry>,
    next_address: u64,
}

impl ViewTable {
    pub fn new(total_views: usize, num_channels: u8, num_rates: u8) -> Self {
        ViewTable { total_views, num_channels, num_rates, entries: BTreeMap::new(), next_address: 1 }
    }

    pub fn total_views(&self) -> usize {
        self.total_views
    }

    pub fn check_key(&self, key: EntryKey) -> Result<()> {
        if !(1..=self.total_views).contains(&key.view) {
            return Err(Error::ViewOutOfRange { view: key.view, total_views: self.total_views });
        }
        if key.link.channel >= self.num_channels || key.link.rate >= self.num_rates {
            return Err(Error::MalformedLink(key.link));
        }
        Ok(())
    }

    pub fn get(&self, key: &EntryKey) -> Option<&ViewTableEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ViewTableEntry> + '_ {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tx_count(&self, key: &EntryKey) -> u32 {
        self.entries.get(key).map_or(0, ViewTableEntry::tx_count)
    }

    /// Entries `user` is subscribed to.
    pub fn entries_of(&self, user: UserId) -> BTreeSet<EntryKey> {
        self.entries.values().filter(|e| e.has_subscriber(user)).map(|e| e.key).collect()
    }

    pub fn plan(&self) -> TransmissionPlan {
        let mut plan = TransmissionPlan::new(self.total_views);
        for e in self.entries.values() {
            plan.set(e.key.view, e.key.link, e.tx_count()).expect("table keys are validated on insert");
        }
        plan
    }

    /// Transmission plan restricted to the given entries.
    pub fn plan_for<'a>(&self, keys: impl IntoIterator<Item = &'a EntryKey>) -> TransmissionPlan {
        let mut plan = TransmissionPlan::new(self.total_views);
        for key in keys {
            let n = self.tx_count(key);
            if n > 0 {
                plan.set(key.view, key.link, n).expect("table keys are validated on insert");
            }
        }
        plan
    }

    pub fn airtime(&self, durations: &[u64]) -> Airtime {
        airtime_of(self.entries.values().map(|e| (e.key.link, e.tx_count())), durations)
    }

    /// Subscribe the sender to every requested entry, creating missing ones.
    /// Returns the newly created keys. All requests are validated before any
    /// is applied.
    pub fn handle_join(&mut self, msg: &JoinMessage, now: u64) -> Result<Vec<EntryKey>> {
        for r in msg.requests() {
            self.check_key(r.key)?;
        }
        let mut created = Vec::new();
        for r in msg.requests() {
            let entry = self.entries.entry(r.key).or_insert_with(|| {
                let address = self.next_address;
                self.next_address += 1;
                created.push(r.key);
                ViewTableEntry { key: r.key, multicast_address: address, subscribers: BTreeMap::new() }
            });
            entry
                .subscribers
                .insert(msg.user(), SubscriberRecord { last_refresh: now, requested_tx: r.tx_count });
        }
        Ok(created)
    }

    /// Remove the sender from the listed entries; returns the entries that
    /// lost their last subscriber and stopped.
    pub fn handle_leave(&mut self, msg: &LeaveMessage) -> Vec<EntryKey> {
        let mut stopped = Vec::new();
        for key in msg.released() {
            if let Some(entry) = self.entries.get_mut(key) {
                entry.subscribers.remove(&msg.user());
                if entry.subscribers.is_empty() {
                    self.entries.remove(key);
                    stopped.push(*key);
                }
            }
        }
        stopped
    }

    /// Soft-state refresh: the periodic re-sent Join of `user`.
    pub fn refresh(&mut self, user: UserId, now: u64) {
        for entry in self.entries.values_mut() {
            if let Some(rec) = entry.subscribers.get_mut(&user) {
                rec.last_refresh = now;
            }
        }
    }

    /// Drop every subscription not refreshed within `timeout` frames.
    pub fn expire_soft_state(&mut self, now: u64, timeout: u64) -> BTreeSet<UserId> {
        let mut dropped = BTreeSet::new();
        self.entries.retain(|_, entry| {
            entry.subscribers.retain(|user, rec| {
                let keep = now.saturating_sub(rec.last_refresh) <= timeout;
                if !keep {
                    dropped.insert(*user);
                }
                keep
            });
            !entry.subscribers.is_empty()
        });
        dropped
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (key, entry) in &self.entries {
            if entry.subscribers.is_empty() {
                return Err(Error::InvariantBreach(format!("entry {key} has no subscribers")));
            }
            if entry.key != *key {
                return Err(Error::InvariantBreach(format!("entry {key} is filed under the wrong key")));
            }
            self.check_key(*key).map_err(|e| Error::InvariantBreach(e.to_string()))?;
        }
        Ok(())
    }

    /// `TABLE frame=<n> entries=<v:c:r:n_tx:[subs],...>`, subscribers
    /// separated by `;`.
    pub fn trace_line(&self, frame: u64) -> String {
        let entries: Vec<String> = self
            .entries
            .values()
            .map(|e| {
                let subs: Vec<String> = e.subscribers.keys().map(ToString::to_string).collect();
                format!("{}:{}:[{}]", e.key, e.tx_count(), subs.join(";"))
            })
            .collect();
        format!("TABLE frame={frame} entries={}", entries.join(","))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    /// Upper bound on the view failure probability each client aims for.
    pub failure_threshold: f64,
    /// Auxiliary (left/right) entries a client may receive on top of its own views.
    pub max_aux_views: usize,
    pub default_tx_count: u32,
    pub max_tx_count: u32,
    /// Frames a subscription survives without a refresh.
    pub soft_state_timeout: u64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            failure_threshold: 0.05,
            max_aux_views: 4,
            default_tx_count: 1,
            max_tx_count: 3,
            soft_state_timeout: 3,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        check_probability(self.failure_threshold)?;
        if self.default_tx_count == 0 || self.max_tx_count < self.default_tx_count {
            return Err(Error::InvalidArgument(format!(
                "tx counts must satisfy 1 <= default ({}) <= max ({})",
                self.default_tx_count, self.max_tx_count
            )));
        }
        if self.soft_state_timeout == 0 {
            return Err(Error::InvalidArgument("soft_state_timeout must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub user: UserId,
    pub subscription: Subscription,
    /// Entries the client has joined.
    pub receiving: BTreeSet<EntryKey>,
    pub channel_state: UserChannelState,
    pub failure_threshold: f64,
    pub max_aux_views: usize,
}

impl ClientState {
    pub fn new(subscription: Subscription, channel_state: UserChannelState, params: &ProtocolParams) -> Self {
        ClientState {
            user: subscription.user(),
            subscription,
            receiving: BTreeSet::new(),
            channel_state,
            failure_threshold: params.failure_threshold,
            max_aux_views: params.max_aux_views,
        }
    }

    fn usable(&self, link: Link) -> bool {
        self.channel_state.loss_on(link).is_some_and(|p| p < 1.0)
    }
}

/// Outcome of a client's view selection against a ViewTable snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinSelection {
    /// Already-joined entries the client keeps.
    pub keep: BTreeSet<EntryKey>,
    /// Existing entries to join at their current broadcast count.
    pub joins: BTreeSet<EntryKey>,
    /// Entries to create, or existing entries whose count must be raised.
    pub new_entries: Vec<JoinRequest>,
    /// Already-joined entries the client no longer needs.
    pub release: BTreeSet<EntryKey>,
    /// Worst failure probability over the subscribed views after the change.
    pub failure_prob: f64,
    /// True when the threshold could not be met even with the most robust
    /// direct entry.
    pub saturated: bool,
}

impl JoinSelection {
    /// Every entry the client receives after applying the selection.
    pub fn selected(&self) -> BTreeSet<EntryKey> {
        let mut all = self.keep.clone();
        all.extend(self.joins.iter().copied());
        all.extend(self.new_entries.iter().map(|r| r.key));
        all
    }

    pub fn join_message(&self, user: UserId, table: &ViewTable) -> Option<JoinMessage> {
        // A kept entry was judged at its current count; pin that count if
        // another subscriber is the one holding it up.
        let pinned = self.keep.iter().filter(|k| {
            let requested = table.get(k).and_then(|e| e.subscribers.get(&user)).map_or(0, |s| s.requested_tx);
            requested < table.tx_count(k) && !self.new_entries.iter().any(|r| r.key == **k)
        });
        let requests = self
            .joins
            .iter()
            .chain(pinned)
            .map(|k| JoinRequest { key: *k, tx_count: table.tx_count(k) })
            .chain(self.new_entries.iter().copied());
        JoinMessage::new(user, requests).ok()
    }

    pub fn leave_message(&self, user: UserId) -> Option<LeaveMessage> {
        LeaveMessage::new(user, self.release.iter().copied()).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewChange {
    pub leave: Option<LeaveMessage>,
    pub join: Option<JoinMessage>,
    pub selection: JoinSelection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reorganization {
    pub leave: LeaveMessage,
    pub join: Option<JoinMessage>,
}

/// Candidate receive set: entry -> broadcasts per frame the client counts on.
type Chosen = BTreeMap<EntryKey, u32>;

/// Client-side MVGMP decisions for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub synthesis: SynthesisConfig,
    /// Airtime of one broadcast per rate index.
    pub durations: Vec<u64>,
    pub params: ProtocolParams,
}

impl Protocol {
    pub fn new(synthesis: SynthesisConfig, durations: Vec<u64>, params: ProtocolParams) -> Result<Self> {
        params.validate()?;
        if durations.is_empty() {
            return Err(Error::InvalidArgument("no rates configured".into()));
        }
        Ok(Protocol { synthesis, durations, params })
    }

    fn entry_airtime(&self, key: &EntryKey, count: u32) -> u64 {
        u64::from(count) * self.durations[key.link.rate as usize]
    }

    /// Failure probability of `view` when receiving exactly `chosen`.
    pub fn failure_with(&self, client: &ClientState, chosen: &BTreeMap<EntryKey, u32>, view: View) -> f64 {
        let mut losses = vec![1.0; self.synthesis.total_views()];
        for (key, &n) in chosen {
            if let Some(p) = client.channel_state.loss_on(key.link) {
                losses[key.view - 1] *= p.powi(n as i32);
            }
        }
        failure_from_view_losses(&losses, self.synthesis.dibr_range(), view)
    }

    /// Failure probability of each subscribed view over the client's joined entries.
    pub fn client_failure(&self, client: &ClientState, table: &ViewTable) -> Vec<(View, f64)> {
        let chosen = current_set(client, table);
        client.subscription.views().iter().map(|&v| (v, self.failure_with(client, &chosen, v))).collect()
    }

    /// Decide which entries to receive for the client's subscribed views.
    ///
    /// Per subscribed view: join its existing entry; while above threshold,
    /// add the transmitted left/right pair within `R` with the largest
    /// decrement; if still above, request a direct entry at the cheapest
    /// `(link, count)` meeting the threshold (the most robust one otherwise);
    /// finally drop entries that are no longer needed, largest airtime first.
    pub fn select_views_on_join(&self, client: &ClientState, table: &ViewTable) -> Result<JoinSelection> {
        for &v in client.subscription.views() {
            self.synthesis.check_view(v)?;
        }
        let mut chosen = current_set(client, table);
        let mut proposals: BTreeMap<EntryKey, u32> = BTreeMap::new();
        for &d in client.subscription.views() {
            self.select_for_view(client, table, d, &mut chosen, &mut proposals);
        }
        self.prune(client, &mut chosen, &mut proposals);

        let failure_prob = client
            .subscription
            .views()
            .iter()
            .map(|&v| self.failure_with(client, &chosen, v))
            .fold(0.0, f64::max);
        let mut selection = JoinSelection {
            failure_prob,
            saturated: failure_prob > client.failure_threshold,
            ..JoinSelection::default()
        };
        for key in chosen.keys() {
            if let Some(&n) = proposals.get(key) {
                selection.new_entries.push(JoinRequest { key: *key, tx_count: n });
            } else if client.receiving.contains(key) {
                selection.keep.insert(*key);
            } else {
                selection.joins.insert(*key);
            }
        }
        selection.release = client.receiving.iter().filter(|k| !chosen.contains_key(k)).copied().collect();
        Ok(selection)
    }

    fn is_aux(client: &ClientState, key: &EntryKey) -> bool {
        !client.subscription.contains(key.view)
    }

    fn budget(&self, client: &ClientState) -> usize {
        client.max_aux_views + client.subscription.views().len()
    }

    fn select_for_view(
        &self,
        client: &ClientState,
        table: &ViewTable,
        desired: View,
        chosen: &mut Chosen,
        proposals: &mut Chosen,
    ) {
        let threshold = client.failure_threshold;
        let range = self.synthesis.dibr_range();
        let mut failure = self.failure_with(client, chosen, desired);

        // Step 1: the subscribed view itself, when the table carries it.
        if !chosen.keys().any(|k| k.view == desired) && chosen.len() < self.budget(client) {
            let best = table
                .entries()
                .filter(|e| e.key.view == desired && client.usable(e.key.link))
                .map(|e| {
                    let mut trial = chosen.clone();
                    trial.insert(e.key, e.tx_count());
                    let f = self.failure_with(client, &trial, desired);
                    (f, self.entry_airtime(&e.key, e.tx_count()), e.key, e.tx_count())
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            if let Some((f, _, key, n)) = best {
                if f < failure {
                    chosen.insert(key, n);
                    failure = f;
                }
            }
        }

        // Step 2: left/right pairs already on the air.
        if range > 1 {
            while failure > threshold {
                let aux_now = chosen.keys().filter(|k| Self::is_aux(client, k)).count();
                let window: Vec<&ViewTableEntry> = table
                    .entries()
                    .filter(|e| {
                        e.key.view != desired
                            && e.key.view + range > desired
                            && e.key.view < desired + range
                            && client.usable(e.key.link)
                    })
                    .collect();
                let mut best: Option<(f64, u64, View, Vec<EntryKey>)> = None;
                for left in window.iter().filter(|e| e.key.view < desired) {
                    for right in window.iter().filter(|e| e.key.view > desired && e.key.view - left.key.view <= range) {
                        let added: Vec<&ViewTableEntry> =
                            [*left, *right].into_iter().filter(|e| !chosen.contains_key(&e.key)).collect();
                        if added.is_empty() {
                            continue;
                        }
                        let added_aux = added.iter().filter(|e| Self::is_aux(client, &e.key)).count();
                        if aux_now + added_aux > client.max_aux_views || chosen.len() + added.len() > self.budget(client) {
                            continue;
                        }
                        let mut trial = chosen.clone();
                        for e in &added {
                            trial.insert(e.key, e.tx_count());
                        }
                        let decrement = failure - self.failure_with(client, &trial, desired);
                        let airtime: u64 = added.iter().map(|e| self.entry_airtime(&e.key, e.tx_count())).sum();
                        let keys: Vec<EntryKey> = added.iter().map(|e| e.key).collect();
                        let first_view = keys.iter().map(|k| k.view).min().unwrap_or(0);
                        let better = match &best {
                            None => true,
                            Some((d, a, v, k)) => decrement
                                .total_cmp(d)
                                .then(a.cmp(&airtime))
                                .then(v.cmp(&first_view))
                                .then(k.cmp(&keys))
                                .is_gt(),
                        };
                        if better {
                            best = Some((decrement, airtime, first_view, keys));
                        }
                    }
                }
                match best {
                    Some((decrement, _, _, keys)) if decrement > 0.0 => {
                        for k in keys {
                            chosen.insert(k, table.tx_count(&k));
                        }
                        failure = self.failure_with(client, chosen, desired);
                    }
                    _ => break,
                }
            }
        }

        // Step 3: request the subscribed view directly.
        if failure > threshold {
            self.propose_direct(client, table, desired, chosen, proposals);
        }
    }

    fn propose_direct(&self, client: &ClientState, table: &ViewTable, desired: View, chosen: &mut Chosen, proposals: &mut Chosen) {
        let threshold = client.failure_threshold;
        let channel_load = per_channel_airtime(table, &self.durations);
        struct Option_ {
            key: EntryKey,
            count: u32,
            failure: f64,
            cost: u64,
            trial: Chosen,
        }
        let mut options = Vec::new();
        for (link, p) in client.channel_state.links() {
            if p >= 1.0 || table.check_key(EntryKey { view: desired, link }).is_err() {
                continue;
            }
            let key = EntryKey { view: desired, link };
            let on_air = table.tx_count(&key);
            let held = chosen.get(&key).copied().unwrap_or(0);
            let counts = (self.params.default_tx_count..=self.params.max_tx_count).chain((on_air > 0).then_some(on_air));
            for count in counts {
                if count <= held {
                    continue;
                }
                let mut trial = chosen.clone();
                trial.insert(key, count);
                self.shed_to_budget(client, desired, key, &mut trial);
                let failure = self.failure_with(client, &trial, desired);
                let cost = self.entry_airtime(&key, count.saturating_sub(on_air));
                options.push(Option_ { key, count, failure, cost, trial });
            }
        }
        let load = |o: &Option_| channel_load.get(o.key.link.channel as usize).copied().unwrap_or(0);
        let pick = if options.iter().any(|o| o.failure <= threshold) {
            options.into_iter().filter(|o| o.failure <= threshold).min_by(|a, b| {
                a.cost
                    .cmp(&b.cost)
                    .then(b.key.link.rate.cmp(&a.key.link.rate))
                    .then(load(a).cmp(&load(b)))
                    .then(a.key.link.channel.cmp(&b.key.link.channel))
                    .then(a.count.cmp(&b.count))
            })
        } else {
            options.into_iter().min_by(|a, b| {
                a.failure
                    .total_cmp(&b.failure)
                    .then(a.cost.cmp(&b.cost))
                    .then(b.key.link.rate.cmp(&a.key.link.rate))
                    .then(load(a).cmp(&load(b)))
                    .then(a.key.link.channel.cmp(&b.key.link.channel))
            })
        };
        let Some(pick) = pick else { return };
        if pick.failure >= self.failure_with(client, chosen, desired) {
            return;
        }
        proposals.retain(|k, _| pick.trial.contains_key(k));
        *chosen = pick.trial;
        if pick.count > table.tx_count(&pick.key) {
            proposals.insert(pick.key, pick.count);
        } else {
            proposals.remove(&pick.key);
        }
    }

    /// Stay within the receive budget by shedding, one at a time, the entry
    /// whose loss hurts `desired` least. `keep` is never shed.
    fn shed_to_budget(&self, client: &ClientState, desired: View, keep: EntryKey, trial: &mut Chosen) {
        while trial.len() > self.budget(client) {
            let victim = trial
                .keys()
                .filter(|k| **k != keep)
                .map(|k| {
                    let mut t = trial.clone();
                    t.remove(k);
                    (self.failure_with(client, &t, desired), *k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            match victim {
                Some((_, k)) => {
                    trial.remove(&k);
                }
                None => break,
            }
        }
    }

    /// Drop entries whose removal keeps every subscribed view at or below the
    /// threshold (or, for views already above it, does not make them worse).
    fn prune(&self, client: &ClientState, chosen: &mut Chosen, proposals: &mut Chosen) {
        let threshold = client.failure_threshold;
        let mut order: Vec<(u64, EntryKey)> = chosen.iter().map(|(k, n)| (self.entry_airtime(k, *n), *k)).collect();
        order.sort_by(|a, b| b.cmp(a));
        for (_, key) in order {
            let before: Vec<f64> =
                client.subscription.views().iter().map(|&v| self.failure_with(client, chosen, v)).collect();
            let mut trial = chosen.clone();
            trial.remove(&key);
            let removable = client.subscription.views().iter().zip(&before).all(|(&v, &fb)| {
                let fa = self.failure_with(client, &trial, v);
                if fb <= threshold {
                    fa <= threshold
                } else {
                    fa <= fb
                }
            });
            if removable {
                *chosen = trial;
                proposals.remove(&key);
            }
        }
    }

    /// Switch the client's single desired view to `new_view`, keeping joined
    /// entries that still help and releasing the rest.
    pub fn change_view(&self, client: &ClientState, new_view: View, table: &ViewTable) -> Result<ViewChange> {
        self.synthesis.check_view(new_view)?;
        if client.subscription.views() == [new_view] {
            return Err(Error::InvalidArgument(format!("user {} already watches view {new_view}", client.user)));
        }
        let range = self.synthesis.dibr_range();
        let mut next = client.clone();
        next.subscription = Subscription::single(client.user, new_view, self.synthesis.total_views())?;
        next.receiving = client
            .receiving
            .iter()
            .filter(|k| k.view + range > new_view && k.view < new_view + range)
            .copied()
            .collect();
        let selection = self.select_views_on_join(&next, table)?;
        let after = selection.selected();
        let leave = LeaveMessage::new(client.user, client.receiving.iter().filter(|k| !after.contains(k)).copied()).ok();
        let join = selection.join_message(client.user, table);
        Ok(ViewChange { leave, join, selection })
    }

    /// React to another user's Leave: for every released entry this client
    /// is now the sole subscriber of, move to an entry that others still
    /// receive when that keeps the client within its threshold.
    pub fn client_reorganize_on_leave(
        &self,
        client: &ClientState,
        departing: &LeaveMessage,
        table: &ViewTable,
    ) -> Option<Reorganization> {
        if departing.user() == client.user {
            return None;
        }
        let shared: Vec<EntryKey> = client.receiving.intersection(departing.released()).copied().collect();
        if shared.is_empty() {
            return None;
        }
        let threshold = client.failure_threshold;
        let range = self.synthesis.dibr_range();
        let views = client.subscription.views();
        let in_window = |v: View| views.iter().any(|&d| v + range > d && v < d + range);
        let ok = |chosen: &Chosen| views.iter().all(|&d| self.failure_with(client, chosen, d) <= threshold);

        let mut chosen = current_set(client, table);
        let mut released = Vec::new();
        let mut joined = Vec::new();
        for v in shared {
            let Some(entry) = table.get(&v) else { continue };
            if !entry.only_subscriber_is(client.user) || !chosen.contains_key(&v) {
                continue;
            }
            let mut without = chosen.clone();
            without.remove(&v);
            if ok(&without) {
                chosen = without;
                released.push(v);
                continue;
            }
            let best = table
                .entries()
                .filter(|e| !chosen.contains_key(&e.key) && !e.has_subscriber(client.user))
                .filter(|e| client.usable(e.key.link) && in_window(e.key.view))
                .filter_map(|e| {
                    let mut trial = without.clone();
                    trial.insert(e.key, e.tx_count());
                    let worst = views.iter().map(|&d| self.failure_with(client, &trial, d)).fold(0.0, f64::max);
                    (worst <= threshold).then_some((worst, e.key, e.tx_count()))
                })
                .min_by(|a, b| a.1.view.cmp(&b.1.view).then(a.0.total_cmp(&b.0)).then(a.1.cmp(&b.1)));
            if let Some((_, key, n)) = best {
                without.insert(key, n);
                chosen = without;
                released.push(v);
                joined.push(JoinRequest { key, tx_count: n });
            }
        }
        if !released.is_empty() {
            // The release may lean on counts raised by others; pin them.
            for (key, &n) in &chosen {
                let requested = table.get(key).and_then(|e| e.subscribers.get(&client.user)).map_or(n, |s| s.requested_tx);
                if requested < n && !joined.iter().any(|r| r.key == *key) {
                    joined.push(JoinRequest { key: *key, tx_count: n });
                }
            }
        }
        let leave = LeaveMessage::new(client.user, released).ok()?;
        let join = JoinMessage::new(client.user, joined).ok();
        Some(Reorganization { leave, join })
    }
}

fn current_set(client: &ClientState, table: &ViewTable) -> Chosen {
    client
        .receiving
        .iter()
        .filter_map(|k| table.get(k).map(|e| (*k, e.tx_count())))
        .collect()
}

fn per_channel_airtime(table: &ViewTable, durations: &[u64]) -> Vec<u64> {
    let mut load = Vec::new();
    for e in table.entries() {
        let c = e.key.link.channel as usize;
        if load.len() <= c {
            load.resize(c + 1, 0);
        }
        load[c] += u64::from(e.tx_count()) * durations[e.key.link.rate as usize];
    }
    load
}
