//! C ABI over the `mvgmp` library.
//!
//! Every fallible call returns an [`MvgmpStatus`]. On failure the message is
//! kept per thread and can be read with [`mvgmp_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the access the function
//! makes: handles from this library that were not yet freed, arrays of at
//! least the stated length, and NUL-terminated strings. Handles are not
//! synchronized; share one across threads only with external locking.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mvgmp::analytics::{
    alpha_asymptotic_spaced, alpha_asymptotic_zipf_consecutive, expected_alpha_exact, view_failure_prob,
    ZipfPeriodicSubscription,
};
use mvgmp::cli::RunConfig;
use mvgmp::model::Subscription;
use mvgmp::protocol::{EntryKey, JoinMessage, JoinRequest, LeaveMessage, ViewTable};
use mvgmp::sim::{run_scenario_streaming, Scheme, SchemeSummary, SummaryStatus};
use mvgmp::{Error, Link, SynthesisConfig, TransmissionPlan, UserChannelState, UserId};

#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MvgmpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidProbability = 3,
    ViewOutOfRange = 4,
    InvalidConfig = 5,
    InvariantBreach = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MvgmpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidProbability(_) => MvgmpStatus::InvalidProbability,
            Error::ViewOutOfRange { .. } => MvgmpStatus::ViewOutOfRange,
            Error::InvalidSynthesis(_)
            | Error::InvalidZipf(_)
            | Error::InvalidPhy(_)
            | Error::InvalidWorkload(_) => MvgmpStatus::InvalidConfig,
            Error::InvariantBreach(_) => MvgmpStatus::InvariantBreach,
            _ => MvgmpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MvgmpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(MvgmpStatus::InvalidArgument, message.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvgmpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvgmpStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MvgmpStatus::Panic
        }
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mvgmp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn small(value: u32, what: &str) -> Result<u8, Failure> {
    u8::try_from(value).map_err(|_| invalid(format!("{what} {value} does not fit in 0..=255")))
}

/// Limit of the obtained view fraction when one view in every `spacing`
/// views is multicast and each is lost with probability `loss_p`. Use
/// `spacing = 1` for full multicast.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_alpha_asymptotic(
    loss_p: f64,
    dibr_range: usize,
    spacing: usize,
    alpha: *mut f64,
) -> MvgmpStatus {
    guard(|| {
        let alpha = out(alpha, "alpha")?;
        *alpha = alpha_asymptotic_spaced(loss_p, dibr_range, spacing)?.value;
        Ok(())
    })
}

/// Limit of the obtained view fraction under a periodic Zipf subscription
/// with probability `normalizer / phase^exponent` per view.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_alpha_zipf(
    success_p: f64,
    dibr_range: usize,
    period: usize,
    exponent: f64,
    normalizer: f64,
    alpha: *mut f64,
) -> MvgmpStatus {
    guard(|| {
        let alpha = out(alpha, "alpha")?;
        let zipf = ZipfPeriodicSubscription::new(period, exponent, normalizer)?;
        *alpha = alpha_asymptotic_zipf_consecutive(success_p, dibr_range, &zipf)?.value;
        Ok(())
    })
}

/// Per-link loss probabilities of one user.
pub struct MvgmpUser(UserChannelState);

/// Copies of each view sent on each link.
pub struct MvgmpPlan(TransmissionPlan);

/// Build a user from a row-major `channels x rates` loss matrix. Entries of
/// `1.0` mark links the user cannot hear. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_user_new(loss: *const f64, channels: u32, rates: u32) -> *mut MvgmpUser {
    let mut handle = ptr::null_mut();
    let status = guard(|| {
        let (c, r) = (small(channels, "channels")?, small(rates, "rates")?);
        let loss = slice(loss, c as usize * r as usize, "loss")?;
        let links = (0..c).flat_map(|ch| (0..r).map(move |rt| Link::new(ch, rt)));
        let state = UserChannelState::new(UserId(0), links.zip(loss.iter().copied()))?;
        handle = Box::into_raw(Box::new(MvgmpUser(state)));
        Ok(())
    });
    if status == MvgmpStatus::Ok {
        handle
    } else {
        ptr::null_mut()
    }
}

#[no_mangle]
pub unsafe extern "C" fn mvgmp_user_free(user: *mut MvgmpUser) {
    if !user.is_null() {
        drop(Box::from_raw(user));
    }
}

/// An empty plan over views `1..=total_views`. Returns null when
/// `total_views` is zero.
#[no_mangle]
pub extern "C" fn mvgmp_plan_new(total_views: usize) -> *mut MvgmpPlan {
    if total_views == 0 {
        set_error("total_views must be at least 1".into());
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(MvgmpPlan(TransmissionPlan::new(total_views))))
}

#[no_mangle]
pub unsafe extern "C" fn mvgmp_plan_free(plan: *mut MvgmpPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Send `count` copies of `view` on `(channel, rate)`, replacing any
/// previous count for that triple.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_plan_set(
    plan: *mut MvgmpPlan,
    view: usize,
    channel: u32,
    rate: u32,
    count: u32,
) -> MvgmpStatus {
    guard(|| {
        let plan = out(plan, "plan")?;
        let link = Link::new(small(channel, "channel")?, small(rate, "rate")?);
        plan.0.set(view, link, count)?;
        Ok(())
    })
}

/// Probability that the user neither receives nor can synthesize `view`.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_view_failure_prob(
    dibr_range: usize,
    user: *const MvgmpUser,
    plan: *const MvgmpPlan,
    view: usize,
    failure: *mut f64,
) -> MvgmpStatus {
    guard(|| {
        let user = user.as_ref().ok_or_else(|| null("user"))?;
        let plan = plan.as_ref().ok_or_else(|| null("plan"))?;
        let failure = out(failure, "failure")?;
        let cfg = SynthesisConfig::new(plan.0.total_views(), dibr_range)?;
        *failure = view_failure_prob(&cfg, &user.0, &plan.0, view)?;
        Ok(())
    })
}

/// Expected fraction of the `num_views` subscribed views the user obtains.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_expected_alpha(
    dibr_range: usize,
    user: *const MvgmpUser,
    plan: *const MvgmpPlan,
    views: *const usize,
    num_views: usize,
    alpha: *mut f64,
) -> MvgmpStatus {
    guard(|| {
        let user = user.as_ref().ok_or_else(|| null("user"))?;
        let plan = plan.as_ref().ok_or_else(|| null("plan"))?;
        let views = slice(views, num_views, "views")?;
        let alpha = out(alpha, "alpha")?;
        let total = plan.0.total_views();
        let cfg = SynthesisConfig::new(total, dibr_range)?;
        let sub = Subscription::new(UserId(0), views.iter().copied(), total)?;
        *alpha = expected_alpha_exact(&cfg, &user.0, &plan.0, &sub)?.value;
        Ok(())
    })
}

/// The access point's view table.
pub struct MvgmpViewTable(ViewTable);

#[repr(C)]
#[derive(Copy, Clone, Debug)]
pub struct MvgmpEntryKey {
    pub view: usize,
    pub channel: u8,
    pub rate: u8,
}

impl From<MvgmpEntryKey> for EntryKey {
    fn from(k: MvgmpEntryKey) -> Self {
        EntryKey::new(k.view, k.channel, k.rate)
    }
}

#[repr(C)]
#[derive(Copy, Clone, Debug)]
pub struct MvgmpJoinRequest {
    pub key: MvgmpEntryKey,
    pub tx_count: u32,
}

#[no_mangle]
pub extern "C" fn mvgmp_table_new(total_views: usize, channels: u8, rates: u8) -> *mut MvgmpViewTable {
    if total_views == 0 || channels == 0 || rates == 0 {
        set_error("total_views, channels and rates must all be at least 1".into());
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(MvgmpViewTable(ViewTable::new(total_views, channels, rates))))
}

#[no_mangle]
pub unsafe extern "C" fn mvgmp_table_free(table: *mut MvgmpViewTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Apply a Join from `user` at frame `now`. Nothing changes on failure.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_table_join(
    table: *mut MvgmpViewTable,
    user: u32,
    requests: *const MvgmpJoinRequest,
    num_requests: usize,
    now: u64,
) -> MvgmpStatus {
    guard(|| {
        let table = out(table, "table")?;
        let requests = slice(requests, num_requests, "requests")?;
        let msg = JoinMessage::new(
            UserId(user),
            requests.iter().map(|r| JoinRequest { key: r.key.into(), tx_count: r.tx_count }),
        )?;
        table.0.handle_join(&msg, now)?;
        Ok(())
    })
}

/// Apply a Leave from `user`. `stopped`, when not null, receives the number
/// of entries that lost their last subscriber.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_table_leave(
    table: *mut MvgmpViewTable,
    user: u32,
    keys: *const MvgmpEntryKey,
    num_keys: usize,
    stopped: *mut usize,
) -> MvgmpStatus {
    guard(|| {
        let table = out(table, "table")?;
        let keys = slice(keys, num_keys, "keys")?;
        let msg = LeaveMessage::new(UserId(user), keys.iter().map(|&k| EntryKey::from(k)))?;
        let n = table.0.handle_leave(&msg).len();
        if let Some(s) = stopped.as_mut() {
            *s = n;
        }
        Ok(())
    })
}

/// Drop subscriptions not refreshed within `timeout` frames of `now`.
/// Returns the number of users that lost at least one subscription.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_table_expire(table: *mut MvgmpViewTable, now: u64, timeout: u64) -> usize {
    table.as_mut().map_or(0, |t| t.0.expire_soft_state(now, timeout).len())
}

/// Number of active entries; zero for a null table.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_table_len(table: *const MvgmpViewTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.len())
}

/// On-air copies of an entry; zero when the entry is absent.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_table_tx_count(table: *const MvgmpViewTable, key: MvgmpEntryKey) -> u32 {
    table.as_ref().map_or(0, |t| t.0.tx_count(&key.into()))
}

#[repr(C)]
#[derive(Copy, Clone, Debug, Default)]
pub struct MvgmpSchemeSummary {
    pub mean_channel_time: f64,
    pub channel_time_se: f64,
    pub mean_makespan: f64,
    pub success_rate: f64,
    pub user_frames: u64,
}

impl From<SchemeSummary> for MvgmpSchemeSummary {
    fn from(s: SchemeSummary) -> Self {
        MvgmpSchemeSummary {
            mean_channel_time: s.mean_channel_time,
            channel_time_se: s.channel_time_se,
            mean_makespan: s.mean_makespan,
            success_rate: s.success_rate,
            user_frames: s.user_frames,
        }
    }
}

/// Steady-state summary of one run. `sufficient` is 0 when the run had too
/// few frames after warmup for the statistics to mean anything.
#[repr(C)]
#[derive(Copy, Clone, Debug, Default)]
pub struct MvgmpSummary {
    pub sufficient: u8,
    pub frames: u64,
    pub mean_population: f64,
    pub mean_transmitted_views: f64,
    pub mvgmp: MvgmpSchemeSummary,
    pub baseline: MvgmpSchemeSummary,
}

/// Run both schemes on the base scenario of a TOML run config (any sweep is
/// ignored) with the given seed.
#[no_mangle]
pub unsafe extern "C" fn mvgmp_run_scenario(
    config_toml: *const c_char,
    seed: u64,
    summary: *mut MvgmpSummary,
) -> MvgmpStatus {
    guard(|| {
        if config_toml.is_null() {
            return Err(null("config_toml"));
        }
        let summary = out(summary, "summary")?;
        let text = CStr::from_ptr(config_toml).to_str().map_err(|e| invalid(format!("config is not UTF-8: {e}")))?;
        let config = RunConfig::from_toml(text).map_err(|e| Failure(MvgmpStatus::InvalidConfig, e.to_string()))?;
        let s = run_scenario_streaming(&config.scenario(), seed, Scheme::Both, |_| Ok(()))?;
        *summary = MvgmpSummary {
            sufficient: u8::from(s.status == SummaryStatus::Ok),
            frames: s.frames,
            mean_population: s.mean_population,
            mean_transmitted_views: s.mean_transmitted_views,
            mvgmp: s.mvgmp.map(Into::into).unwrap_or_default(),
            baseline: s.baseline.map(Into::into).unwrap_or_default(),
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_are_reported_per_thread() {
        let mut a = 0.0;
        let status = unsafe { mvgmp_alpha_asymptotic(1.5, 1, 1, &mut a) };
        assert_eq!(status, MvgmpStatus::InvalidProbability);
        let msg = unsafe { CStr::from_ptr(mvgmp_last_error()) }.to_str().unwrap().to_owned();
        assert!(msg.contains("1.5"), "{msg}");
        std::thread::spawn(|| assert!(mvgmp_last_error().is_null())).join().unwrap();
    }

    #[test]
    fn null_outputs_are_rejected() {
        assert_eq!(unsafe { mvgmp_alpha_asymptotic(0.1, 1, 1, ptr::null_mut()) }, MvgmpStatus::NullPointer);
        assert_eq!(unsafe { mvgmp_plan_set(ptr::null_mut(), 1, 0, 0, 1) }, MvgmpStatus::NullPointer);
    }
}
