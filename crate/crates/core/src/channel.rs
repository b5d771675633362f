//! 802.11n cell: per-rate airtime of one view broadcast and per-user loss
//! probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::model::{Link, TransmissionPlan, UserChannelState, UserId};
use crate::rng::{mix, stream, stream_rng};

/// MCS 0-7, 40 MHz, one spatial stream, long guard interval.
pub const HT40_RATES_MBPS: [f64; 8] = [13.5, 27.0, 40.5, 54.0, 81.0, 108.0, 121.5, 135.0];

pub const NUM_RATES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhyConfig {
    pub channel_bandwidth_mhz: f64,
    pub carrier_ghz: f64,
    pub num_channels: u8,
    pub rates_mbps: Vec<f64>,
    pub view_size_bits: u64,
    /// Channel-time granularity in seconds.
    pub time_unit_s: f64,
    pub ofdm_data_symbols: u32,
    pub subcarriers: u32,
    pub tx_power_dbm: f64,
    /// Fixed preamble/padding cost added to every broadcast, in time units.
    pub per_broadcast_overhead: u64,
    /// How users map to per-link loss probabilities.
    pub loss: LossModel,
}

impl Default for PhyConfig {
    fn default() -> Self {
        PhyConfig {
            channel_bandwidth_mhz: 40.0,
            carrier_ghz: 5.0,
            num_channels: 2,
            rates_mbps: HT40_RATES_MBPS.to_vec(),
            view_size_bits: 64_000,
            time_unit_s: 1e-6,
            ofdm_data_symbols: 7,
            subcarriers: 108,
            tx_power_dbm: 16.0,
            per_broadcast_overhead: 0,
            loss: LossModel::default(),
        }
    }
}

impl PhyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates_mbps.len() != NUM_RATES {
            return Err(Error::InvalidPhy(format!(
                "expected {NUM_RATES} rates, got {}",
                self.rates_mbps.len()
            )));
        }
        if !self.rates_mbps.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(Error::InvalidPhy("rates must be positive".into()));
        }
        if !self.rates_mbps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidPhy("rates must be strictly increasing".into()));
        }
        if self.view_size_bits == 0 {
            return Err(Error::InvalidPhy("view_size_bits must be positive".into()));
        }
        if self.num_channels == 0 {
            return Err(Error::InvalidPhy("num_channels must be at least 1".into()));
        }
        if !(self.time_unit_s.is_finite() && self.time_unit_s > 0.0) {
            return Err(Error::InvalidPhy("time_unit_s must be positive".into()));
        }
        self.loss.validate(self)
    }

    pub fn num_rates(&self) -> usize {
        self.rates_mbps.len()
    }

    /// Airtime of one broadcast at every rate, indexed by rate.
    pub fn durations(&self) -> Vec<u64> {
        (0..self.num_rates()).map(|r| tx_duration(self, r).expect("index in range")).collect()
    }

    pub fn links(&self) -> impl Iterator<Item = Link> + '_ {
        (0..self.num_channels).flat_map(move |c| (0..self.num_rates() as u8).map(move |r| Link::new(c, r)))
    }
}

/// Channel time of one view broadcast: `ceil(view_size / bits per unit)`
/// plus the configured overhead.
pub fn tx_duration(phy: &PhyConfig, rate_index: usize) -> Result<u64> {
    let rate = *phy
        .rates_mbps
        .get(rate_index)
        .ok_or(Error::RateOutOfRange { index: rate_index, rates: phy.rates_mbps.len() })?;
    let bits_per_unit = rate * 1e6 * phy.time_unit_s;
    let units = phy.view_size_bits as f64 / bits_per_unit;
    // Absorb representation error so exact quotients do not round up.
    let units = (units - 1e-9 * units.max(1.0)).ceil().max(0.0) as u64;
    Ok(units + phy.per_broadcast_overhead)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Airtime {
    /// Sum over all channels.
    pub total: u64,
    /// Busiest single channel.
    pub makespan: u64,
}

/// Channel time of one frame of `plan` given per-rate broadcast durations.
pub fn plan_airtime(plan: &TransmissionPlan, durations: &[u64]) -> Airtime {
    airtime_of(plan.iter().map(|(_, link, n)| (link, n)), durations)
}

pub fn airtime_of(broadcasts: impl IntoIterator<Item = (Link, u32)>, durations: &[u64]) -> Airtime {
    let mut per_channel: Vec<u64> = Vec::new();
    for (link, n) in broadcasts {
        let c = link.channel as usize;
        if per_channel.len() <= c {
            per_channel.resize(c + 1, 0);
        }
        per_channel[c] += u64::from(n) * durations[link.rate as usize];
    }
    Airtime {
        total: per_channel.iter().sum(),
        makespan: per_channel.iter().copied().max().unwrap_or(0),
    }
}

/// Distance-to-loss curve: `p(d, r) = 1 / (1 + exp(-(d - d50[r]) / width))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmoidParams {
    pub cell_radius_m: f64,
    /// Distance at which each rate loses half its broadcasts.
    pub midpoints_m: Vec<f64>,
    pub width_m: f64,
}

impl Default for SigmoidParams {
    fn default() -> Self {
        SigmoidParams {
            cell_radius_m: 100.0,
            midpoints_m: vec![150.0, 128.0, 110.0, 96.0, 82.0, 70.0, 62.0, 56.0],
            width_m: 6.0,
        }
    }
}

impl SigmoidParams {
    pub fn loss(&self, distance_m: f64, rate_index: usize) -> f64 {
        let z = (distance_m - self.midpoints_m[rate_index]) / self.width_m;
        1.0 / (1.0 + (-z).exp())
    }

    fn validate(&self, phy: &PhyConfig) -> Result<()> {
        if self.midpoints_m.len() != phy.num_rates() {
            return Err(Error::InvalidPhy(format!(
                "sigmoid needs {} midpoints, got {}",
                phy.num_rates(),
                self.midpoints_m.len()
            )));
        }
        if !self.midpoints_m.windows(2).all(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPhy("sigmoid midpoints must not increase with rate".into()));
        }
        if !(self.width_m > 0.0 && self.cell_radius_m > 0.0) {
            return Err(Error::InvalidPhy("sigmoid width and cell radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossModel {
    /// `rows[user][channel][rate]`; a row may cover a prefix of the rates.
    ExplicitMatrix { rows: Vec<Vec<Vec<f64>>> },
    DistanceSigmoid(SigmoidParams),
    LogDistance(LogDistanceParams),
}

impl Default for LossModel {
    fn default() -> Self {
        LossModel::LogDistance(LogDistanceParams::default())
    }
}

/// Minimum input sensitivity of HT MCS 0-7 at 40 MHz, in dBm.
pub const HT40_SENSITIVITY_DBM: [f64; 8] = [-79.0, -76.0, -74.0, -71.0, -67.0, -63.0, -62.0, -61.0];

/// Log-distance path loss from the AP's transmit power, with a normally
/// distributed per-broadcast fading margin (in dB). A broadcast at rate `r`
/// is lost when the received power falls below `sensitivity_dbm[r]`:
///
/// `p(d, r) = Phi((S_r - P_tx + PL(1 m) + 10 n log10 d) / sigma)`
///
/// `PL(1 m)` is the free-space loss at the carrier frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogDistanceParams {
    pub cell_radius_m: f64,
    pub path_loss_exponent: f64,
    pub fading_sigma_db: f64,
    pub sensitivity_dbm: Vec<f64>,
}

impl Default for LogDistanceParams {
    fn default() -> Self {
        LogDistanceParams {
            cell_radius_m: 12.5,
            path_loss_exponent: 3.0,
            fading_sigma_db: 10.0,
            sensitivity_dbm: HT40_SENSITIVITY_DBM.to_vec(),
        }
    }
}

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

impl LogDistanceParams {
    pub fn received_dbm(&self, phy: &PhyConfig, distance_m: f64) -> f64 {
        let d = distance_m.max(1.0);
        let reference = 20.0 * (4.0 * std::f64::consts::PI * phy.carrier_ghz * 1e9 / SPEED_OF_LIGHT).log10();
        phy.tx_power_dbm - reference - 10.0 * self.path_loss_exponent * d.log10()
    }

    pub fn loss(&self, phy: &PhyConfig, distance_m: f64, rate_index: usize) -> f64 {
        let margin = self.received_dbm(phy, distance_m) - self.sensitivity_dbm[rate_index];
        0.5 * libm::erfc(margin / (self.fading_sigma_db * std::f64::consts::SQRT_2))
    }

    fn validate(&self, phy: &PhyConfig) -> Result<()> {
        if self.sensitivity_dbm.len() != phy.num_rates() {
            return Err(Error::InvalidPhy(format!(
                "log-distance needs {} sensitivities, got {}",
                phy.num_rates(),
                self.sensitivity_dbm.len()
            )));
        }
        if !self.sensitivity_dbm.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::InvalidPhy("sensitivities must not decrease with rate".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(positive(self.cell_radius_m) && positive(self.path_loss_exponent) && positive(self.fading_sigma_db)) {
            return Err(Error::InvalidPhy(
                "cell radius, path loss exponent and fading sigma must be positive".into(),
            ));
        }
        if !(positive(phy.carrier_ghz) && phy.tx_power_dbm.is_finite()) {
            return Err(Error::InvalidPhy("carrier frequency and tx power must be finite".into()));
        }
        Ok(())
    }
}

impl LossModel {
    pub fn validate(&self, phy: &PhyConfig) -> Result<()> {
        match self {
            LossModel::ExplicitMatrix { rows } => {
                for (i, row) in rows.iter().enumerate() {
                    check_matrix_row(i, row, phy)?;
                }
                Ok(())
            }
            LossModel::DistanceSigmoid(params) => params.validate(phy),
            LossModel::LogDistance(params) => params.validate(phy),
        }
    }

    /// Radius of the disk users are placed in, for the distance-based models.
    pub fn cell_radius_m(&self) -> Option<f64> {
        match self {
            LossModel::ExplicitMatrix { .. } => None,
            LossModel::DistanceSigmoid(p) => Some(p.cell_radius_m),
            LossModel::LogDistance(p) => Some(p.cell_radius_m),
        }
    }

    /// Channel state of a user placed `distance_m` from the AP.
    pub fn state_at(&self, user: UserId, phy: &PhyConfig, distance_m: f64) -> Result<UserChannelState> {
        let loss = |l: Link| match self {
            LossModel::DistanceSigmoid(p) => Ok(p.loss(distance_m, l.rate as usize)),
            LossModel::LogDistance(p) => Ok(p.loss(phy, distance_m, l.rate as usize)),
            LossModel::ExplicitMatrix { .. } => {
                Err(Error::InvalidPhy("explicit matrices do not place users".into()))
            }
        };
        let links = phy.links().map(|l| loss(l).map(|p| (l, p))).collect::<Result<Vec<_>>>()?;
        UserChannelState::new(user, links)
    }
}

fn check_matrix_row(index: usize, row: &[Vec<f64>], phy: &PhyConfig) -> Result<()> {
    if row.is_empty() || row.len() > phy.num_channels as usize {
        return Err(Error::MalformedMatrix(format!(
            "row {index} has {} channels, cell has {}",
            row.len(),
            phy.num_channels
        )));
    }
    let width = row[0].len();
    if width == 0 || width > phy.num_rates() || row.iter().any(|c| c.len() != width) {
        return Err(Error::MalformedMatrix(format!(
            "row {index} must list the same 1..={} rates on every channel",
            phy.num_rates()
        )));
    }
    for p in row.iter().flatten() {
        check_probability(*p).map_err(|_| Error::MalformedMatrix(format!("row {index} holds {p}")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserAssignment {
    pub state: UserChannelState,
    /// Distance from the AP, when the model places users.
    pub distance_m: Option<f64>,
}

/// Channel state of user number `index` (id `user`). Deterministic in `seed`.
pub fn assign_user_loss(
    model: &LossModel,
    index: usize,
    user: UserId,
    phy: &PhyConfig,
    seed: u64,
) -> Result<UserAssignment> {
    match model {
        LossModel::ExplicitMatrix { rows } => {
            let row = rows
                .get(index)
                .ok_or_else(|| Error::MalformedMatrix(format!("no row for user index {index}")))?;
            check_matrix_row(index, row, phy)?;
            let links = row.iter().enumerate().flat_map(|(c, rates)| {
                rates.iter().enumerate().map(move |(r, p)| (Link::new(c as u8, r as u8), *p))
            });
            Ok(UserAssignment { state: UserChannelState::new(user, links)?, distance_m: None })
        }
        LossModel::DistanceSigmoid(_) | LossModel::LogDistance(_) => {
            model.validate(phy)?;
            let mut rng = stream_rng(mix(&[seed, u64::from(user.0)]), stream::PLACEMENT);
            let distance = uniform_disk_distance(model, &mut rng);
            Ok(UserAssignment { state: model.state_at(user, phy, distance)?, distance_m: Some(distance) })
        }
    }
}

/// Distance from the AP of a point uniform over the cell disk.
pub fn uniform_disk_distance<R: Rng + ?Sized>(model: &LossModel, rng: &mut R) -> f64 {
    model.cell_radius_m().unwrap_or(0.0) * rng.random::<f64>().sqrt()
}
