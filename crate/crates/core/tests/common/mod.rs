//! Randomized protocol event sequences and the invariants checked after
//! every step. Shared by the property tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mvgmp::analytics::view_failure_prob;
use mvgmp::channel::PhyConfig;
use mvgmp::model::{Link, Subscription, SynthesisConfig, UserChannelState, UserId};
use mvgmp::protocol::{ClientState, JoinMessage, JoinRequest, LeaveMessage, Protocol, ProtocolParams};
use mvgmp::sim::Cell;
use proptest::prelude::*;

pub const LOSS_LEVELS: [f64; 7] = [0.0, 0.01, 0.03, 0.1, 0.3, 0.6, 0.95];

#[derive(Clone, Debug)]
pub struct Setup {
    pub views: usize,
    pub range: usize,
    pub channels: u8,
    pub params: ProtocolParams,
}

#[derive(Clone, Debug)]
pub enum Ev {
    Arrive { view: usize, loss: Vec<u8> },
    Leave(usize),
    Change(usize, usize),
    Silent(usize),
    Move(usize, Vec<u8>),
    Tick,
}

pub fn setup_strategy() -> impl Strategy<Value = Setup> {
    (3usize..=10, 1usize..=4, 1u8..=2, 0usize..3, 0usize..=4, 1u32..=3, 1u64..=3).prop_map(
        |(views, range, channels, th, max_aux, max_tx, timeout)| Setup {
            views,
            range,
            channels,
            params: ProtocolParams {
                failure_threshold: [0.01, 0.05, 0.2][th],
                max_aux_views: max_aux,
                default_tx_count: 1,
                max_tx_count: max_tx,
                soft_state_timeout: timeout,
            },
        },
    )
}

fn loss_strategy() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..LOSS_LEVELS.len() as u8, 16)
}

pub fn event_strategy() -> impl Strategy<Value = Ev> {
    prop_oneof![
        4 => (1usize..=10, loss_strategy()).prop_map(|(view, loss)| Ev::Arrive { view, loss }),
        2 => any::<usize>().prop_map(Ev::Leave),
        3 => (any::<usize>(), 1usize..=10).prop_map(|(u, v)| Ev::Change(u, v)),
        1 => any::<usize>().prop_map(Ev::Silent),
        1 => (any::<usize>(), loss_strategy()).prop_map(|(u, l)| Ev::Move(u, l)),
        1 => Just(Ev::Tick),
    ]
}

pub fn sequence_strategy(max_len: usize) -> impl Strategy<Value = (Setup, Vec<Ev>)> {
    (setup_strategy(), prop::collection::vec(event_strategy(), 1..max_len))
}

/// Loss per link, made non-decreasing in the rate so faster rates are never
/// more reliable.
fn channel_state(user: UserId, loss: &[u8], channels: u8) -> UserChannelState {
    let mut per_link = Vec::new();
    for c in 0..channels {
        let mut level = 0;
        for r in 0..8u8 {
            level = level.max(loss[(c as usize * 8 + r as usize) % loss.len()]);
            per_link.push((Link::new(c, r), LOSS_LEVELS[level as usize]));
        }
    }
    UserChannelState::new(user, per_link).unwrap()
}

pub struct Harness {
    pub setup: Setup,
    pub synthesis: SynthesisConfig,
    pub durations: Vec<u64>,
    pub cell: Cell,
    pub frame: u64,
    /// Users whose last selection could not meet the threshold.
    pub saturated: BTreeSet<UserId>,
    /// Users gone without a Leave whose entries may still be in the table.
    pub ghosts: BTreeSet<UserId>,
    next: u32,
}

impl Harness {
    pub fn new(setup: Setup) -> Self {
        let synthesis = SynthesisConfig::new(setup.views, setup.range).unwrap();
        let phy = PhyConfig { num_channels: setup.channels, ..PhyConfig::default() };
        let durations = phy.durations();
        let protocol = Protocol::new(synthesis, durations.clone(), setup.params).unwrap();
        let cell = Cell::new(protocol, setup.channels, 8, true);
        Harness {
            setup,
            synthesis,
            durations,
            cell,
            frame: 0,
            saturated: BTreeSet::new(),
            ghosts: BTreeSet::new(),
            next: 0,
        }
    }

    fn live(&self) -> Vec<UserId> {
        self.cell.clients().keys().copied().collect()
    }

    fn pick(&self, i: usize) -> Option<UserId> {
        let live = self.live();
        (!live.is_empty()).then(|| live[i % live.len()])
    }

    fn airtime(&self) -> u64 {
        self.cell.table().airtime(&self.durations).total
    }

    fn failure(&self, client: &ClientState) -> f64 {
        let plan = self.cell.table().plan_for(client.receiving.iter());
        let view = client.subscription.views()[0];
        view_failure_prob(&self.synthesis, &client.channel_state, &plan, view).unwrap()
    }

    fn note_join(&mut self, id: UserId) -> Result<(), String> {
        let sel = self.cell.join(id, self.frame).map_err(|e| e.to_string())?.expect("active cell");
        let client = &self.cell.clients()[&id];
        let threshold = client.failure_threshold;
        if sel.saturated {
            // Saturation is only allowed when no direct entry could do it.
            let max_tx = self.setup.params.max_tx_count as i32;
            let best = client.channel_state.links().map(|(_, p)| p.powi(max_tx)).fold(1.0, f64::min);
            if best <= threshold {
                return Err(format!("user {id} reported saturated but a direct entry reaches {best}"));
            }
            self.saturated.insert(id);
        } else {
            let f = self.failure(client);
            if f > threshold + 1e-12 {
                return Err(format!("post-join: user {id} at {f} > {threshold}"));
            }
            self.saturated.remove(&id);
        }
        Ok(())
    }

    /// Apply one event as a frame and check every invariant.
    pub fn step(&mut self, ev: &Ev) -> Result<(), String> {
        let m = self.setup.views;
        let mut joins = Vec::new();
        let before = self.airtime();
        match ev {
            Ev::Leave(i) => {
                if let Some(id) = self.pick(*i) {
                    self.cell.depart(id).map_err(|e| e.to_string())?;
                    self.saturated.remove(&id);
                }
            }
            Ev::Silent(i) => {
                if let Some(id) = self.pick(*i) {
                    self.cell.vanish(id).map_err(|e| e.to_string())?;
                    self.saturated.remove(&id);
                    self.ghosts.insert(id);
                }
            }
            Ev::Change(i, v) => {
                if let Some(id) = self.pick(*i) {
                    let view = (v - 1) % m + 1;
                    if self.cell.clients()[&id].subscription.views()[0] == view {
                        return self.finish(Vec::new());
                    }
                    self.cell.begin_change(id, view).map_err(|e| e.to_string())?;
                    joins.push(id);
                }
            }
            _ => {}
        }
        let after_leaves = self.airtime();
        if after_leaves > before {
            return Err(format!("monotone cleanup: leaves raised airtime {before} -> {after_leaves}"));
        }
        self.cell.reorganize(self.frame).map_err(|e| e.to_string())?;
        let after_reorg = self.airtime();
        if after_reorg > after_leaves {
            return Err(format!("monotone cleanup: reorganization raised airtime {after_leaves} -> {after_reorg}"));
        }
        self.check_threshold("after reorganization", &joins)?;

        match ev {
            Ev::Arrive { view, loss } => {
                let id = UserId(self.next);
                self.next += 1;
                let view = (view - 1) % m + 1;
                let state = channel_state(id, loss, self.setup.channels);
                let sub = Subscription::single(id, view, m).unwrap();
                self.cell.insert(ClientState::new(sub, state, &self.setup.params)).map_err(|e| e.to_string())?;
                joins.push(id);
            }
            Ev::Move(i, loss) => {
                if let Some(id) = self.pick(*i) {
                    self.cell.set_channel_state(id, channel_state(id, loss, self.setup.channels)).unwrap();
                    joins.push(id);
                }
            }
            _ => {}
        }
        self.finish(joins)
    }

    fn finish(&mut self, joins: Vec<UserId>) -> Result<(), String> {
        for id in joins {
            self.note_join(id)?;
        }
        let expired = self.cell.refresh_and_expire(self.frame);
        for id in &expired {
            if self.cell.clients().contains_key(id) {
                return Err(format!("live user {id} expired"));
            }
        }
        self.ghosts.retain(|g| !expired.contains(g));
        self.cell.check_invariants(self.frame).map_err(|e| e.to_string())?;
        self.check_conservation()?;
        self.check_threshold("end of frame", &[])?;
        self.check_idempotence()?;
        self.frame += 1;
        Ok(())
    }

    /// Every settled user meets its threshold; `pending` are mid view change.
    fn check_threshold(&self, when: &str, pending: &[UserId]) -> Result<(), String> {
        for (id, client) in self.cell.clients() {
            if self.saturated.contains(id) || pending.contains(id) {
                continue;
            }
            let f = self.failure(client);
            if f > client.failure_threshold + 1e-12 {
                return Err(format!("{when}: user {id} at {f} > {}", client.failure_threshold));
            }
        }
        Ok(())
    }

    fn check_conservation(&self) -> Result<(), String> {
        let table = self.cell.table();
        let mut seen = BTreeSet::new();
        for e in table.entries() {
            if e.subscribers.is_empty() {
                return Err(format!("entry {} without subscribers", e.key));
            }
            for u in e.subscribers.keys() {
                if !self.cell.clients().contains_key(u) && !self.ghosts.contains(u) {
                    return Err(format!("entry {} lists departed user {u}", e.key));
                }
                seen.insert(*u);
            }
        }
        for (id, c) in self.cell.clients() {
            if !c.receiving.is_empty() && !seen.contains(id) {
                return Err(format!("user {id} receives entries the table does not list"));
            }
        }
        Ok(())
    }

    /// Re-sending a user's Join, or a Leave twice, changes nothing.
    fn check_idempotence(&self) -> Result<(), String> {
        let table = self.cell.table();
        let snapshot = table.trace_line(self.frame);
        for (id, c) in self.cell.clients() {
            if c.receiving.is_empty() {
                continue;
            }
            let requests: Vec<JoinRequest> = c
                .receiving
                .iter()
                .map(|k| JoinRequest { key: *k, tx_count: table.get(k).unwrap().subscribers[id].requested_tx })
                .collect();
            let msg = JoinMessage::new(*id, requests).unwrap();
            let mut t = table.clone();
            t.handle_join(&msg, self.frame).map_err(|e| e.to_string())?;
            t.handle_join(&msg, self.frame).map_err(|e| e.to_string())?;
            if t.trace_line(self.frame) != snapshot {
                return Err(format!("idempotence: re-sent join of user {id} changed the table"));
            }
            let leave = LeaveMessage::new(*id, c.receiving.iter().copied()).unwrap();
            t.handle_leave(&leave);
            let once = t.trace_line(self.frame);
            let stopped = t.handle_leave(&leave);
            if !stopped.is_empty() || t.trace_line(self.frame) != once {
                return Err(format!("idempotence: repeated leave of user {id} changed the table"));
            }
            break;
        }
        Ok(())
    }
}

pub fn run_sequence(setup: &Setup, events: &[Ev]) -> Result<(), String> {
    let mut h = Harness::new(setup.clone());
    for (i, ev) in events.iter().enumerate() {
        h.step(ev).map_err(|e| format!("event {i} ({ev:?}): {e}"))?;
    }
    Ok(())
}

pub fn live_users(h: &Harness) -> BTreeMap<UserId, usize> {
    h.cell.clients().iter().map(|(id, c)| (*id, c.subscription.views()[0])).collect()
}
