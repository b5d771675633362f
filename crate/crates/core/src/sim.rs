//! Frame-stepped driver for the dynamic workload.
//!
//! Each frame: workload decisions are drawn, then MVGMP messages are
//! processed in a fixed order (Leaves, reorganizations, Joins, refresh,
//! soft-state expiry), then both schemes transmit and every user's
//! reception is sampled. Reception draws are keyed by
//! `(seed, frame, user, view, link, copy)`, so a broadcast that both
//! schemes make is received or lost identically under both.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::channel::{airtime_of, assign_user_loss, uniform_disk_distance, PhyConfig};
use crate::error::{check_probability, Error, Result};
use crate::model::{Link, Subscription, SynthesisConfig, UserChannelState, UserId, View};
use crate::protocol::{ClientState, JoinMessage, JoinSelection, LeaveMessage, Protocol, ProtocolParams, ViewTable};
use crate::rng::{keyed_uniform, stream, stream_rng, SimRng};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Preference {
    #[default]
    Uniform,
    /// `P(rank k) ∝ 1/k^s` over `n` ranks; rank 1 is the central view and
    /// further ranks alternate outward.
    Zipf { s: f64, n: usize },
    Normal {
        mean: f64,
        variance: f64,
        #[serde(default)]
        scale: NormalScale,
    },
}

/// How a normal draw lands on view indices.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalScale {
    /// `mean` is a fraction of the view count and `variance` is in views²:
    /// `v = round(mean·M + sd·z)`.
    #[default]
    Views,
    /// Both parameters live on a unit axis: `v = round(x·(M−1)) + 1`.
    Normalized,
}

impl Preference {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Preference::Uniform => Ok(()),
            Preference::Zipf { s, n } => {
                if n == 0 || !(s.is_finite() && s >= 0.0) {
                    return Err(Error::InvalidWorkload(format!("zipf needs n >= 1 and s >= 0, got n={n} s={s}")));
                }
                Ok(())
            }
            Preference::Normal { mean, variance, .. } => {
                if !mean.is_finite() || !(variance.is_finite() && variance > 0.0) {
                    return Err(Error::InvalidWorkload(format!("normal needs finite mean and variance > 0, got {mean}, {variance}")));
                }
                Ok(())
            }
        }
    }
}

/// View of popularity rank `rank` (1-based): `⌈M/2⌉`, then one step right,
/// one step left, and so on.
pub fn rank_to_view(rank: usize, views: usize) -> View {
    let center = views.div_ceil(2) as i64;
    let mut seen = 0;
    for step in 0.. {
        let offset = (step as i64 + 1) / 2;
        let v = if step % 2 == 1 { center + offset } else { center - offset };
        if (1..=views as i64).contains(&v) {
            seen += 1;
            if seen == rank {
                return v as View;
            }
        }
        if offset > views as i64 {
            break;
        }
    }
    views
}

pub fn sample_preference<R: Rng + ?Sized>(pref: &Preference, views: usize, rng: &mut R) -> View {
    assert!(views >= 1, "at least one view");
    match *pref {
        Preference::Uniform => rng.random_range(1..=views),
        Preference::Zipf { s, n } => {
            let ranks = n.min(views);
            let zipf = Zipf::new(ranks as f64, s).expect("validated zipf parameters");
            let rank = zipf.sample(rng) as usize;
            rank_to_view(rank.clamp(1, ranks), views)
        }
        Preference::Normal { mean, variance, scale } => {
            let v = match scale {
                NormalScale::Views => {
                    let normal = Normal::new(mean * views as f64, variance.sqrt()).expect("validated normal parameters");
                    normal.sample(rng).round()
                }
                NormalScale::Normalized => {
                    let normal = Normal::new(mean, variance.sqrt()).expect("validated normal parameters");
                    (normal.sample(rng) * (views as f64 - 1.0)).round() + 1.0
                }
            };
            v.clamp(1.0, views as f64) as View
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepartureModel {
    /// One departure per frame with probability `μ`.
    PerFrame,
    /// One departure per frame with probability `min(1, μ·n/N₀)`, where `n`
    /// is the current and `N₀` the initial population. The population then
    /// settles around `N₀·λ/μ` instead of drifting.
    #[default]
    PopulationScaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Number of camera views `M`.
    pub views: usize,
    /// Synthesis quality constraint `R`.
    pub dibr_range: usize,
    pub initial_users: usize,
    pub arrival_prob: f64,
    pub departure_prob: f64,
    pub view_change_prob: f64,
    pub departure_model: DepartureModel,
    pub preference: Preference,
    pub frames: u64,
    /// Frames discarded from the front of every summary.
    pub warmup: u64,
    /// Per user and frame: disappear without a Leave.
    pub silent_departure_prob: f64,
    /// Per user and frame: move to a fresh position and re-select.
    pub mobility_prob: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            views: 16,
            dibr_range: 3,
            initial_users: 50,
            arrival_prob: 0.2,
            departure_prob: 0.3,
            view_change_prob: 0.4,
            departure_model: DepartureModel::default(),
            preference: Preference::Uniform,
            frames: 1000,
            warmup: 100,
            silent_departure_prob: 0.0,
            mobility_prob: 0.0,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("arrival_prob", self.arrival_prob),
            ("departure_prob", self.departure_prob),
            ("view_change_prob", self.view_change_prob),
            ("silent_departure_prob", self.silent_departure_prob),
            ("mobility_prob", self.mobility_prob),
        ] {
            check_probability(p).map_err(|_| Error::InvalidWorkload(format!("{name} = {p} is not a probability")))?;
        }
        if self.frames == 0 {
            return Err(Error::InvalidWorkload("frames must be at least 1".into()));
        }
        SynthesisConfig::new(self.views, self.dibr_range)
            .map_err(|e| Error::InvalidWorkload(format!("views/dibr_range: {e}")))?;
        self.preference.validate()
    }

    pub fn synthesis(&self) -> Result<SynthesisConfig> {
        SynthesisConfig::new(self.views, self.dibr_range)
    }

    /// Set `λ/μ = rho` keeping `λ + μ` fixed.
    pub fn with_loading_ratio(&self, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidWorkload(format!("loading ratio must be positive, got {rho}")));
        }
        let total = self.arrival_prob + self.departure_prob;
        Ok(WorkloadConfig {
            arrival_prob: total * rho / (1.0 + rho),
            departure_prob: total / (1.0 + rho),
            ..self.clone()
        })
    }

    fn departure_chance(&self, population: usize) -> f64 {
        match self.departure_model {
            DepartureModel::PerFrame => self.departure_prob,
            DepartureModel::PopulationScaled => {
                let reference = self.initial_users.max(1) as f64;
                (self.departure_prob * population as f64 / reference).min(1.0)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub phy: PhyConfig,
    pub workload: WorkloadConfig,
    pub protocol: ProtocolParams,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.phy.validate()?;
        self.workload.validate()?;
        self.protocol.validate()
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Mvgmp,
    Baseline,
    #[default]
    Both,
}

impl Scheme {
    pub fn runs_mvgmp(self) -> bool {
        matches!(self, Scheme::Mvgmp | Scheme::Both)
    }

    pub fn runs_baseline(self) -> bool {
        matches!(self, Scheme::Baseline | Scheme::Both)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Mvgmp => "mvgmp",
            Scheme::Baseline => "baseline",
            Scheme::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameOutcome {
    pub frame: u64,
    pub population: usize,
    /// Live ViewTable entries.
    pub transmitted_views: usize,
    pub baseline_views: usize,
    pub channel_time_mvgmp: Option<u64>,
    pub channel_time_baseline: Option<u64>,
    pub makespan_mvgmp: Option<u64>,
    pub makespan_baseline: Option<u64>,
    pub success_mvgmp: BTreeMap<UserId, bool>,
    pub success_baseline: BTreeMap<UserId, bool>,
}

/// The view a single-view client watches.
pub fn desired_view(client: &ClientState) -> View {
    client.subscription.views()[0]
}

/// Direct-or-synthesis rule over a received-view mask (index 0 unused).
pub(crate) fn obtained(received: &[bool], range: usize, view: View) -> bool {
    if received[view] {
        return true;
    }
    let left = (1..view).rev().find(|&v| received[v]);
    let right = (view + 1..received.len()).find(|&v| received[v]);
    matches!((left, right), (Some(l), Some(r)) if r - l <= range)
}

/// Conventional multicast link for a subscriber set: the fastest link whose
/// worst-subscriber loss is within `threshold`, else the most robust one.
/// Ties prefer the channel with less load so far, then the lower channel.
pub fn baseline_link<'a>(
    subscribers: impl IntoIterator<Item = &'a UserChannelState> + Clone,
    phy: &PhyConfig,
    threshold: f64,
    channel_load: &[u64],
) -> Link {
    let worst = |link: Link| {
        subscribers
            .clone()
            .into_iter()
            .map(|s| s.loss_on(link).unwrap_or(1.0))
            .fold(0.0, f64::max)
    };
    let load = |link: Link| channel_load.get(link.channel as usize).copied().unwrap_or(0);
    let candidates: Vec<(Link, f64)> = phy.links().map(|l| (l, worst(l))).collect();
    let qualifying = candidates.iter().filter(|(_, p)| *p <= threshold);
    let by_speed = |a: &&(Link, f64), b: &&(Link, f64)| {
        b.0.rate.cmp(&a.0.rate).then(load(a.0).cmp(&load(b.0))).then(a.0.channel.cmp(&b.0.channel))
    };
    if let Some((link, _)) = qualifying.min_by(by_speed) {
        return *link;
    }
    candidates
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| by_speed(a, b)))
        .map(|(l, _)| *l)
        .expect("cell has at least one link")
}

/// MVGMP state of one cell: the AP's ViewTable plus every client's own
/// record of what it receives. Messages are applied in the per-frame order
/// Leaves, reorganizations, Joins, refresh, expiry; the caller drives the
/// phases. With `active` unset only the client records are kept (for runs
/// of the conventional scheme alone).
#[derive(Clone, Debug)]
pub struct Cell {
    protocol: Protocol,
    table: ViewTable,
    clients: BTreeMap<UserId, ClientState>,
    active: bool,
    pending: VecDeque<LeaveMessage>,
    log: Option<Vec<String>>,
}

impl Cell {
    pub fn new(protocol: Protocol, num_channels: u8, num_rates: u8, active: bool) -> Self {
        let table = ViewTable::new(protocol.synthesis.total_views(), num_channels, num_rates);
        Cell { protocol, table, clients: BTreeMap::new(), active, pending: VecDeque::new(), log: None }
    }

    /// Keep the text form of every applied message; see [`Cell::take_log`].
    pub fn record_messages(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn take_log(&mut self) -> Vec<String> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn table(&self) -> &ViewTable {
        &self.table
    }

    pub fn clients(&self) -> &BTreeMap<UserId, ClientState> {
        &self.clients
    }

    pub fn client(&self, id: UserId) -> Option<&ClientState> {
        self.clients.get(&id)
    }

    fn client_mut(&mut self, id: UserId) -> Result<&mut ClientState> {
        self.clients
            .get_mut(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no user {id} in the cell")))
    }

    fn apply_leave(&mut self, msg: LeaveMessage) {
        if let Some(log) = &mut self.log {
            log.push(msg.to_string());
        }
        self.table.handle_leave(&msg);
        if let Some(client) = self.clients.get_mut(&msg.user()) {
            client.receiving.retain(|k| !msg.released().contains(k));
        }
        self.pending.push_back(msg);
    }

    fn apply_join(&mut self, msg: &JoinMessage, now: u64) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.push(msg.to_string());
        }
        self.table.handle_join(msg, now)?;
        if let Some(client) = self.clients.get_mut(&msg.user()) {
            client.receiving.extend(msg.keys());
        }
        Ok(())
    }

    /// Add a client that has not joined anything yet.
    pub fn insert(&mut self, client: ClientState) -> Result<()> {
        if self.clients.contains_key(&client.user) {
            return Err(Error::InvalidArgument(format!("user {} is already in the cell", client.user)));
        }
        self.clients.insert(client.user, ClientState { receiving: BTreeSet::new(), ..client });
        Ok(())
    }

    /// Run the client's view selection against the current table and send
    /// the resulting Leave and Join. Returns the selection (none for a
    /// passive cell).
    pub fn join(&mut self, id: UserId, now: u64) -> Result<Option<JoinSelection>> {
        if !self.active {
            return Ok(None);
        }
        let client = self.client_mut(id)?.clone();
        let selection = self.protocol.select_views_on_join(&client, &self.table)?;
        if let Some(leave) = selection.leave_message(id) {
            self.apply_leave(leave);
        }
        if let Some(join) = selection.join_message(id, &self.table) {
            self.apply_join(&join, now)?;
        }
        Ok(Some(selection))
    }

    /// The client leaves the cell and releases everything it receives.
    pub fn depart(&mut self, id: UserId) -> Result<ClientState> {
        let client = self.clients.remove(&id).ok_or_else(|| Error::InvalidArgument(format!("no user {id} in the cell")))?;
        if self.active {
            if let Ok(msg) = LeaveMessage::new(id, client.receiving.iter().copied()) {
                self.apply_leave(msg);
            }
        }
        Ok(client)
    }

    /// The client disappears without a Leave; its subscriptions age out.
    pub fn vanish(&mut self, id: UserId) -> Result<ClientState> {
        self.clients.remove(&id).ok_or_else(|| Error::InvalidArgument(format!("no user {id} in the cell")))
    }

    /// First half of a view change: release entries that cannot help the new
    /// view and switch the subscription. The Join follows in the join phase
    /// through [`Cell::join`].
    pub fn begin_change(&mut self, id: UserId, view: View) -> Result<()> {
        let total = self.protocol.synthesis.total_views();
        let client = self.client_mut(id)?.clone();
        if self.active {
            let change = self.protocol.change_view(&client, view, &self.table)?;
            if let Some(msg) = change.leave {
                self.apply_leave(msg);
            }
        } else {
            self.protocol.synthesis.check_view(view)?;
        }
        self.client_mut(id)?.subscription = Subscription::single(id, view, total)?;
        Ok(())
    }

    pub fn set_channel_state(&mut self, id: UserId, state: UserChannelState) -> Result<()> {
        self.client_mut(id)?.channel_state = state;
        Ok(())
    }

    /// Let every client that shares an entry with a processed Leave try to
    /// move off entries it is now alone on.
    pub fn reorganize(&mut self, now: u64) -> Result<()> {
        while let Some(msg) = self.pending.pop_front() {
            if !self.active {
                continue;
            }
            let affected: Vec<UserId> = self
                .clients
                .values()
                .filter(|c| c.user != msg.user() && !c.receiving.is_disjoint(msg.released()))
                .map(|c| c.user)
                .collect();
            for id in affected {
                let Some(reorg) = self.protocol.client_reorganize_on_leave(&self.clients[&id], &msg, &self.table) else {
                    continue;
                };
                self.apply_leave(reorg.leave);
                if let Some(join) = &reorg.join {
                    self.apply_join(join, now)?;
                }
            }
        }
        Ok(())
    }

    /// Periodic Joins from every present client, then soft-state expiry.
    pub fn refresh_and_expire(&mut self, now: u64) -> BTreeSet<UserId> {
        // Leaves sent in the join phase carry no reorganization.
        self.pending.clear();
        if !self.active {
            return BTreeSet::new();
        }
        for &id in self.clients.keys() {
            self.table.refresh(id, now);
        }
        self.table.expire_soft_state(now, self.protocol.params.soft_state_timeout)
    }

    pub fn check_invariants(&self, frame: u64) -> Result<()> {
        if !self.active {
            return Ok(());
        }
        self.table.check_invariants()?;
        for (id, client) in &self.clients {
            let joined = self.table.entries_of(*id);
            if joined != client.receiving {
                return Err(Error::InvariantBreach(format!(
                    "frame {frame}: user {id} believes it receives {:?} but the table lists {:?}",
                    client.receiving, joined
                )));
            }
            let budget = client.max_aux_views + client.subscription.views().len();
            if joined.len() > budget {
                return Err(Error::InvariantBreach(format!(
                    "frame {frame}: user {id} receives {} entries, budget {budget}",
                    joined.len()
                )));
            }
        }
        Ok(())
    }
}

/// One running scenario instance. Single-threaded and deterministic in
/// `(config, seed, scheme)`.
#[derive(Debug)]
pub struct Simulation {
    config: ScenarioConfig,
    seed: u64,
    scheme: Scheme,
    cell: Cell,
    distances: BTreeMap<UserId, Option<f64>>,
    next_user: u32,
    frame: u64,
    rng: SimRng,
}

impl Simulation {
    pub fn new(config: ScenarioConfig, seed: u64, scheme: Scheme) -> Result<Self> {
        config.validate()?;
        let synthesis = config.workload.synthesis()?;
        let protocol = Protocol::new(synthesis, config.phy.durations(), config.protocol)?;
        let cell = Cell::new(protocol, config.phy.num_channels, config.phy.num_rates() as u8, scheme.runs_mvgmp());
        let mut sim = Simulation {
            rng: stream_rng(seed, stream::WORKLOAD),
            config,
            seed,
            scheme,
            cell,
            distances: BTreeMap::new(),
            next_user: 0,
            frame: 0,
        };
        for _ in 0..sim.config.workload.initial_users {
            let view = sample_preference(&sim.config.workload.preference, sim.config.workload.views, &mut sim.rng);
            let id = sim.spawn(view)?;
            sim.cell.join(id, 0)?;
        }
        sim.cell.refresh_and_expire(0);
        sim.cell.check_invariants(0)?;
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn cell(&self) -> &Cell {
        &self.cell
    }

    pub fn protocol(&self) -> &Protocol {
        self.cell.protocol()
    }

    pub fn table(&self) -> &ViewTable {
        self.cell.table()
    }

    pub fn users(&self) -> &BTreeMap<UserId, ClientState> {
        self.cell.clients()
    }

    pub fn distance_of(&self, id: UserId) -> Option<f64> {
        self.distances.get(&id).copied().flatten()
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    /// Place a new user and add it to the cell without joining.
    pub fn spawn(&mut self, view: View) -> Result<UserId> {
        let id = UserId(self.next_user);
        let index = self.next_user as usize;
        self.next_user += 1;
        let assignment = assign_user_loss(&self.config.phy.loss, index, id, &self.config.phy, self.seed)?;
        let subscription = Subscription::single(id, view, self.config.workload.views)?;
        self.cell.insert(ClientState::new(subscription, assignment.state, &self.config.protocol))?;
        self.distances.insert(id, assignment.distance_m);
        Ok(id)
    }

    /// Join `id` against the current table.
    pub fn join(&mut self, id: UserId) -> Result<()> {
        self.cell.join(id, self.frame).map(|_| ())
    }

    fn relocate(&mut self, id: UserId) -> Result<()> {
        let model = &self.config.phy.loss;
        if model.cell_radius_m().is_none() {
            return Ok(());
        }
        let distance = uniform_disk_distance(model, &mut self.rng);
        let state = model.state_at(id, &self.config.phy, distance)?;
        self.cell.set_channel_state(id, state)?;
        self.distances.insert(id, Some(distance));
        Ok(())
    }

    /// Advance one frame and report what both schemes delivered.
    pub fn step(&mut self) -> Result<FrameOutcome> {
        let w = self.config.workload.clone();
        let views = w.views;
        let now = self.frame;

        // Workload decisions, all from the workload stream and in a fixed order.
        let arrival = self.rng.random::<f64>() < w.arrival_prob;
        let ids: Vec<UserId> = self.cell.clients().keys().copied().collect();
        let departure = if !ids.is_empty() && self.rng.random::<f64>() < w.departure_chance(ids.len()) {
            Some(ids[self.rng.random_range(0..ids.len())])
        } else {
            None
        };
        let mut changes = Vec::new();
        let mut silent = Vec::new();
        let mut moves = Vec::new();
        for &id in &ids {
            if Some(id) == departure {
                continue;
            }
            if w.silent_departure_prob > 0.0 && self.rng.random::<f64>() < w.silent_departure_prob {
                silent.push(id);
                continue;
            }
            if views > 1 && self.rng.random::<f64>() < w.view_change_prob {
                let current = desired_view(&self.cell.clients()[&id]);
                let next = loop {
                    let v = sample_preference(&w.preference, views, &mut self.rng);
                    if v != current {
                        break v;
                    }
                };
                changes.push((id, next));
            }
            if w.mobility_prob > 0.0 && self.rng.random::<f64>() < w.mobility_prob {
                moves.push(id);
            }
        }
        let arrival_view = arrival.then(|| sample_preference(&w.preference, views, &mut self.rng));

        // Leaves, then reorganizations.
        if let Some(id) = departure {
            self.cell.depart(id)?;
            self.distances.remove(&id);
        }
        for &id in &silent {
            self.cell.vanish(id)?;
            self.distances.remove(&id);
        }
        for &(id, view) in &changes {
            self.cell.begin_change(id, view)?;
        }
        self.cell.reorganize(now)?;

        // Joins.
        if let Some(view) = arrival_view {
            let id = self.spawn(view)?;
            self.cell.join(id, now)?;
        }
        for &(id, _) in &changes {
            self.cell.join(id, now)?;
        }
        for &id in &moves {
            self.relocate(id)?;
            self.cell.join(id, now)?;
        }

        self.cell.refresh_and_expire(now);
        self.cell.check_invariants(now)?;

        let outcome = self.transmit();
        self.frame += 1;
        Ok(outcome)
    }

    fn received(&self, id: UserId, state: &UserChannelState, view: View, link: Link, copy: u32) -> bool {
        let p = state.loss_on(link).unwrap_or(1.0);
        let u = keyed_uniform(&[
            self.seed,
            stream::RECEPTION,
            self.frame,
            u64::from(id.0),
            view as u64,
            u64::from(link.channel),
            u64::from(link.rate),
            u64::from(copy),
        ]);
        u >= p
    }

    fn transmit(&self) -> FrameOutcome {
        let durations = &self.protocol().durations;
        let range = self.config.workload.dibr_range;
        let views = self.config.workload.views;
        let table = self.cell.table();
        let mut outcome = FrameOutcome {
            frame: self.frame,
            population: self.cell.clients().len(),
            transmitted_views: 0,
            baseline_views: 0,
            channel_time_mvgmp: None,
            channel_time_baseline: None,
            makespan_mvgmp: None,
            makespan_baseline: None,
            success_mvgmp: BTreeMap::new(),
            success_baseline: BTreeMap::new(),
        };

        if self.scheme.runs_mvgmp() {
            let airtime = table.airtime(durations);
            outcome.transmitted_views = table.len();
            outcome.channel_time_mvgmp = Some(airtime.total);
            outcome.makespan_mvgmp = Some(airtime.makespan);
            let mut mask = vec![false; views + 1];
            for (&id, client) in self.cell.clients() {
                mask.fill(false);
                for key in &client.receiving {
                    let n = table.tx_count(key);
                    if (0..n).any(|copy| self.received(id, &client.channel_state, key.view, key.link, copy)) {
                        mask[key.view] = true;
                    }
                }
                outcome.success_mvgmp.insert(id, obtained(&mask, range, desired_view(client)));
            }
        }

        if self.scheme.runs_baseline() {
            let plan = self.baseline_plan();
            let airtime = airtime_of(plan.values().map(|l| (*l, 1)), durations);
            outcome.baseline_views = plan.len();
            outcome.channel_time_baseline = Some(airtime.total);
            outcome.makespan_baseline = Some(airtime.makespan);
            for (&id, client) in self.cell.clients() {
                let view = desired_view(client);
                let ok = self.received(id, &client.channel_state, view, plan[&view], 0);
                outcome.success_baseline.insert(id, ok);
            }
        }
        outcome
    }

    /// Every desired view once, on the link chosen by [`baseline_link`].
    pub fn baseline_plan(&self) -> BTreeMap<View, Link> {
        let mut groups: BTreeMap<View, Vec<&UserChannelState>> = BTreeMap::new();
        for client in self.cell.clients().values() {
            groups.entry(desired_view(client)).or_default().push(&client.channel_state);
        }
        let durations = &self.protocol().durations;
        let mut load = vec![0u64; self.config.phy.num_channels as usize];
        groups
            .into_iter()
            .map(|(view, subs)| {
                let link = baseline_link(subs.iter().copied(), &self.config.phy, self.config.protocol.failure_threshold, &load);
                load[link.channel as usize] += durations[link.rate as usize];
                (view, link)
            })
            .collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SummaryStatus {
    Ok,
    InsufficientData,
}

impl fmt::Display for SummaryStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SummaryStatus::Ok => "ok",
            SummaryStatus::InsufficientData => "insufficient-data",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub mean_channel_time: f64,
    /// Standard error of the per-frame channel time (frames treated as independent).
    pub channel_time_se: f64,
    pub mean_makespan: f64,
    /// Successful user-frames over all user-frames.
    pub success_rate: f64,
    pub user_frames: u64,
}

impl SchemeSummary {
    pub fn failure_rate(&self) -> f64 {
        1.0 - self.success_rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub status: SummaryStatus,
    pub frames: u64,
    pub mean_population: f64,
    pub mean_transmitted_views: f64,
    pub mvgmp: Option<SchemeSummary>,
    pub baseline: Option<SchemeSummary>,
}

/// Running totals for one scheme; channel-time variance by Welford's update.
#[derive(Copy, Clone, Debug, Default)]
struct SchemeAccumulator {
    frames: u64,
    mean: f64,
    m2: f64,
    makespan: f64,
    user_frames: u64,
    successes: u64,
}

impl SchemeAccumulator {
    fn push(&mut self, time: u64, makespan: u64, success: &BTreeMap<UserId, bool>) {
        self.frames += 1;
        let t = time as f64;
        let delta = t - self.mean;
        self.mean += delta / self.frames as f64;
        self.m2 += delta * (t - self.mean);
        self.makespan += makespan as f64;
        self.user_frames += success.len() as u64;
        self.successes += success.values().filter(|s| **s).count() as u64;
    }

    fn finish(&self) -> Option<SchemeSummary> {
        if self.frames == 0 {
            return None;
        }
        let n = self.frames as f64;
        let var = if self.frames > 1 { self.m2 / (n - 1.0) } else { 0.0 };
        Some(SchemeSummary {
            mean_channel_time: self.mean,
            channel_time_se: (var / n).sqrt(),
            mean_makespan: self.makespan / n,
            success_rate: if self.user_frames == 0 { f64::NAN } else { self.successes as f64 / self.user_frames as f64 },
            user_frames: self.user_frames,
        })
    }
}

/// Streaming form of [`Summary::from_frames`].
#[derive(Clone, Debug, Default)]
pub struct SummaryAccumulator {
    frames: u64,
    population: f64,
    transmitted: f64,
    mvgmp: SchemeAccumulator,
    baseline: SchemeAccumulator,
}

impl SummaryAccumulator {
    pub fn push(&mut self, frame: &FrameOutcome) {
        self.frames += 1;
        self.population += frame.population as f64;
        self.transmitted += frame.transmitted_views as f64;
        if let Some(t) = frame.channel_time_mvgmp {
            self.mvgmp.push(t, frame.makespan_mvgmp.unwrap_or(0), &frame.success_mvgmp);
        }
        if let Some(t) = frame.channel_time_baseline {
            self.baseline.push(t, frame.makespan_baseline.unwrap_or(0), &frame.success_baseline);
        }
    }

    pub fn finish(&self) -> Summary {
        if self.frames == 0 {
            return Summary {
                status: SummaryStatus::InsufficientData,
                frames: 0,
                mean_population: f64::NAN,
                mean_transmitted_views: f64::NAN,
                mvgmp: None,
                baseline: None,
            };
        }
        let n = self.frames as f64;
        Summary {
            status: SummaryStatus::Ok,
            frames: self.frames,
            mean_population: self.population / n,
            mean_transmitted_views: self.transmitted / n,
            mvgmp: self.mvgmp.finish(),
            baseline: self.baseline.finish(),
        }
    }
}

impl Summary {
    pub fn from_frames(frames: &[FrameOutcome]) -> Self {
        let mut acc = SummaryAccumulator::default();
        frames.iter().for_each(|f| acc.push(f));
        acc.finish()
    }

    /// MVGMP mean channel time over the baseline's.
    pub fn channel_time_ratio(&self) -> Option<f64> {
        Some(self.mvgmp?.mean_channel_time / self.baseline?.mean_channel_time)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRun {
    pub seed: u64,
    pub frames: Vec<FrameOutcome>,
    pub summary: Summary,
}

/// Run `config.workload.frames` frames and summarise everything after the warmup.
pub fn run_scenario(config: &ScenarioConfig, seed: u64, scheme: Scheme) -> Result<ScenarioRun> {
    let mut frames = Vec::with_capacity(config.workload.frames as usize);
    let summary = run_scenario_streaming(config, seed, scheme, |f| {
        frames.push(f.clone());
        Ok(())
    })?;
    Ok(ScenarioRun { seed, frames, summary })
}

/// As [`run_scenario`], handing each frame to `on_frame` instead of keeping it.
pub fn run_scenario_streaming(
    config: &ScenarioConfig,
    seed: u64,
    scheme: Scheme,
    mut on_frame: impl FnMut(&FrameOutcome) -> Result<()>,
) -> Result<Summary> {
    let mut sim = Simulation::new(config.clone(), seed, scheme)?;
    let mut acc = SummaryAccumulator::default();
    for _ in 0..config.workload.frames {
        let frame = sim.step()?;
        if frame.frame >= config.workload.warmup {
            acc.push(&frame);
        }
        on_frame(&frame)?;
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullSubscriptionUser {
    pub user: UserId,
    /// Loss on the shared link all views go out on.
    pub loss: f64,
    /// Fraction of (frame, view) pairs obtained directly or by synthesis.
    pub obtained_fraction: f64,
}

/// Static population that subscribes to every view: each frame all views go
/// out once on the conventional-multicast link of the whole population.
pub fn run_full_subscription(config: &ScenarioConfig, seed: u64, frames: u64) -> Result<Vec<FullSubscriptionUser>> {
    config.validate()?;
    let w = &config.workload;
    let states = (0..w.initial_users)
        .map(|i| assign_user_loss(&config.phy.loss, i, UserId(i as u32), &config.phy, seed).map(|a| a.state))
        .collect::<Result<Vec<_>>>()?;
    if states.is_empty() {
        return Ok(Vec::new());
    }
    let link = baseline_link(states.iter(), &config.phy, config.protocol.failure_threshold, &[]);
    let mut obtained_count = vec![0u64; states.len()];
    let mut mask = vec![false; w.views + 1];
    for frame in 0..frames {
        for (i, state) in states.iter().enumerate() {
            let p = state.loss_on(link).unwrap_or(1.0);
            for (v, slot) in mask.iter_mut().enumerate().skip(1) {
                let u = keyed_uniform(&[
                    seed,
                    stream::RECEPTION,
                    frame,
                    i as u64,
                    v as u64,
                    u64::from(link.channel),
                    u64::from(link.rate),
                    0,
                ]);
                *slot = u >= p;
            }
            obtained_count[i] += (1..=w.views).filter(|&v| obtained(&mask, w.dibr_range, v)).count() as u64;
        }
    }
    let total = (frames * w.views as u64).max(1) as f64;
    Ok(states
        .iter()
        .zip(obtained_count)
        .map(|(s, c)| FullSubscriptionUser {
            user: s.user(),
            loss: s.loss_on(link).unwrap_or(1.0),
            obtained_fraction: c as f64 / total,
        })
        .collect())
}

/// A frozen population (no arrivals, departures or view changes).
pub fn frozen(config: &ScenarioConfig) -> ScenarioConfig {
    let mut frozen = config.clone();
    frozen.workload.arrival_prob = 0.0;
    frozen.workload.departure_prob = 0.0;
    frozen.workload.view_change_prob = 0.0;
    frozen.workload.silent_departure_prob = 0.0;
    frozen.workload.mobility_prob = 0.0;
    frozen
}

/// Desired-view frequencies of `draws` samples, index `v - 1`.
pub fn preference_histogram(pref: &Preference, views: usize, draws: usize, seed: u64) -> Vec<u64> {
    let mut rng = stream_rng(seed, stream::WORKLOAD);
    let mut counts = vec![0u64; views];
    for _ in 0..draws {
        counts[sample_preference(pref, views, &mut rng) - 1] += 1;
    }
    counts
}

/// Users whose entries include `view` at some link.
pub fn subscribers_of(table: &ViewTable, view: View) -> BTreeSet<UserId> {
    table
        .entries()
        .filter(|e| e.key.view == view)
        .flat_map(|e| e.subscribers.keys().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LossModel;

    fn lossless(users: usize, views: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.views = views;
        cfg.workload.initial_users = users;
        cfg.phy.loss = LossModel::ExplicitMatrix { rows: vec![vec![vec![0.0; 8]; 2]; users + 64] };
        cfg
    }

    #[test]
    fn center_outward_ranks() {
        let order: Vec<View> = (1..=16).map(|k| rank_to_view(k, 16)).collect();
        assert_eq!(order, vec![8, 9, 7, 10, 6, 11, 5, 12, 4, 13, 3, 14, 2, 15, 1, 16]);
        let order: Vec<View> = (1..=5).map(|k| rank_to_view(k, 5)).collect();
        assert_eq!(order, vec![3, 4, 2, 5, 1]);
        assert_eq!(rank_to_view(1, 1), 1);
    }

    #[test]
    fn uniform_preference_is_flat() {
        let draws = 100_000;
        let counts = preference_histogram(&Preference::Uniform, 16, draws, 3);
        let p = 1.0 / 16.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn zipf_rank_ratio() {
        let draws = 200_000;
        let counts = preference_histogram(&Preference::Zipf { s: 2.0, n: 16 }, 16, draws, 5);
        let ratio = counts[7] as f64 / counts[8] as f64;
        assert!((ratio - 4.0).abs() < 0.15, "{ratio}");
        assert!(counts[7] > counts[6] && counts[6] > counts[9]);
    }

    #[test]
    fn normal_preference_peaks_in_the_middle() {
        let pref = Preference::Normal { mean: 0.5, variance: 1.0, scale: NormalScale::Views };
        let counts = preference_histogram(&pref, 16, 100_000, 9);
        let mode = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0 + 1;
        assert_eq!(mode, 8);
        let asym = (counts[6] as f64 - counts[8] as f64).abs() / counts[6] as f64;
        assert!(asym < 0.05);
    }

    #[test]
    fn normalized_axis_piles_on_the_boundaries() {
        let pref = Preference::Normal { mean: 0.5, variance: 1.0, scale: NormalScale::Normalized };
        let counts = preference_histogram(&pref, 16, 100_000, 9);
        assert!(counts[0] > counts[7] && counts[15] > counts[7]);
    }

    #[test]
    fn obtained_rule() {
        let mut mask = vec![false; 9];
        mask[3] = true;
        mask[6] = true;
        assert!(obtained(&mask, 3, 4));
        assert!(obtained(&mask, 3, 5));
        assert!(!obtained(&mask, 2, 4));
        assert!(obtained(&mask, 1, 3));
        assert!(!obtained(&mask, 3, 1));
        assert!(!obtained(&mask, 8, 8));
    }

    #[test]
    fn static_lossless_cell() {
        let mut cfg = frozen(&lossless(10, 16));
        cfg.workload.frames = 30;
        cfg.workload.warmup = 0;
        let run = run_scenario(&cfg, 1, Scheme::Both).unwrap();
        let first = run.frames[0].channel_time_mvgmp;
        for f in &run.frames {
            assert_eq!(f.channel_time_mvgmp, first);
            assert_eq!(f.population, 10);
            assert!(f.success_mvgmp.values().all(|s| *s));
            assert!(f.success_baseline.values().all(|s| *s));
        }
    }

    #[test]
    fn single_boundary_user_costs_the_same() {
        let mut cfg = frozen(&lossless(0, 16));
        cfg.workload.frames = 1;
        let mut sim = Simulation::new(cfg, 1, Scheme::Both).unwrap();
        let id = sim.spawn(1).unwrap();
        sim.join(id).unwrap();
        let out = sim.step().unwrap();
        assert_eq!(out.channel_time_mvgmp, out.channel_time_baseline);
        assert_eq!(out.transmitted_views, 1);
    }

    #[test]
    fn empty_population_is_fine() {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.initial_users = 0;
        cfg.workload.arrival_prob = 0.0;
        cfg.workload.frames = 5;
        cfg.workload.warmup = 0;
        let run = run_scenario(&cfg, 2, Scheme::Both).unwrap();
        for f in &run.frames {
            assert_eq!(f.channel_time_mvgmp, Some(0));
            assert_eq!(f.channel_time_baseline, Some(0));
        }
        assert!(run.summary.mvgmp.unwrap().success_rate.is_nan());
    }

    #[test]
    fn warmup_longer_than_run() {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.frames = 5;
        cfg.workload.warmup = 10;
        let run = run_scenario(&cfg, 2, Scheme::Both).unwrap();
        assert_eq!(run.summary.status, SummaryStatus::InsufficientData);
        assert_eq!(run.frames.len(), 5);
    }

    #[test]
    fn deterministic() {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.frames = 150;
        let a = run_scenario(&cfg, 11, Scheme::Both).unwrap();
        let b = run_scenario(&cfg, 11, Scheme::Both).unwrap();
        assert_eq!(a, b);
        let c = run_scenario(&cfg, 12, Scheme::Both).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn baseline_only_matches_the_baseline_half() {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.frames = 40;
        let both = run_scenario(&cfg, 4, Scheme::Both).unwrap();
        let base = run_scenario(&cfg, 4, Scheme::Baseline).unwrap();
        for (x, y) in both.frames.iter().zip(&base.frames) {
            assert_eq!(x.channel_time_baseline, y.channel_time_baseline);
            assert_eq!(x.success_baseline, y.success_baseline);
            assert_eq!(y.channel_time_mvgmp, None);
        }
    }

    #[test]
    fn silent_users_expire() {
        let mut cfg = lossless(20, 16);
        cfg.workload.arrival_prob = 0.0;
        cfg.workload.departure_prob = 0.0;
        cfg.workload.view_change_prob = 0.0;
        cfg.workload.silent_departure_prob = 1.0;
        cfg.workload.frames = 10;
        let mut sim = Simulation::new(cfg, 3, Scheme::Mvgmp).unwrap();
        sim.step().unwrap();
        assert!(sim.users().is_empty());
        assert!(!sim.table().is_empty());
        for _ in 0..4 {
            sim.step().unwrap();
        }
        assert!(sim.table().is_empty());
    }

    #[test]
    fn mobility_keeps_invariants() {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.mobility_prob = 0.2;
        cfg.workload.frames = 80;
        run_scenario(&cfg, 8, Scheme::Both).unwrap();
    }

    #[test]
    fn loading_ratio_mapping() {
        let w = WorkloadConfig::default().with_loading_ratio(4.0).unwrap();
        assert!((w.arrival_prob / w.departure_prob - 4.0).abs() < 1e-12);
        assert!((w.arrival_prob + w.departure_prob - 0.5).abs() < 1e-12);
        assert!(WorkloadConfig::default().with_loading_ratio(0.0).is_err());
    }

    #[test]
    fn zero_frames_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.workload.frames = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidWorkload(_))));
    }
}
