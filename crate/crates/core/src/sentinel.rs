//! Union of a fast policy-level detector and a slow task-progress monitor.
//!
//! The slow side speaks a line-delimited JSON protocol, one
//! [`SlowVerdictEvent`] per line. A slow verdict takes effect when its answer
//! arrives: query timestep plus latency, rounded up to a whole inference step.
//! [`run_slow_stub`] produces such events from scripted rules so the plumbing
//! can be exercised without a real monitor attached.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpisodeVerdict, Rollout};

/// Slack when rounding latencies up to whole inference steps.
const ARRIVAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlowVerdict {
    Ok,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowVerdictEvent {
    pub episode_id: String,
    pub t: usize,
    pub verdict: SlowVerdict,
    pub latency_seconds: f64,
}

impl SlowVerdictEvent {
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 || self.t % k != 0 {
            return Err(Error::invalid(format!(
                "slow event t={} is not a multiple of k={k}",
                self.t
            )));
        }
        if !(self.latency_seconds >= 0.0 && self.latency_seconds.is_finite()) {
            return Err(Error::invalid(format!(
                "slow event latency {} must be a non-negative number",
                self.latency_seconds
            )));
        }
        Ok(())
    }

    /// Timestep at which the answer is available: `t + ceil(latency/dt/k)·k`.
    pub fn arrival_step(&self, dt: f64, k: usize) -> usize {
        let steps = (self.latency_seconds / dt / k as f64 - ARRIVAL_EPS).ceil().max(0.0);
        self.t + steps as usize * k
    }
}

pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<SlowVerdictEvent>> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: format!("malformed slow event: {e}"),
        })?;
        events.push(ev);
    }
    Ok(events)
}

pub fn write_events<W: Write>(mut writer: W, events: &[SlowVerdictEvent]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut writer, ev)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    None,
    Fast,
    Slow,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedVerdict {
    pub flagged: bool,
    pub detection_step: Option<usize>,
    pub source: VerdictSource,
}

impl CombinedVerdict {
    pub fn to_episode_verdict(&self, dt: f64) -> EpisodeVerdict {
        EpisodeVerdict::new(self.detection_step, dt)
    }
}

fn union(fast: Option<usize>, slow: Option<usize>) -> CombinedVerdict {
    let (step, source) = match (fast, slow) {
        (None, None) => (None, VerdictSource::None),
        (Some(f), None) => (Some(f), VerdictSource::Fast),
        (None, Some(s)) => (Some(s), VerdictSource::Slow),
        (Some(f), Some(s)) if f < s => (Some(f), VerdictSource::Fast),
        (Some(f), Some(s)) if s < f => (Some(s), VerdictSource::Slow),
        (Some(f), Some(_)) => (Some(f), VerdictSource::Both),
    };
    CombinedVerdict {
        flagged: step.is_some(),
        detection_step: step,
        source,
    }
}

/// Incremental combiner. Feed fast flags and slow events as they arrive;
/// [`Combiner::verdict`] after any prefix equals [`combine`] on that prefix.
#[derive(Debug, Clone)]
pub struct Combiner {
    dt: f64,
    k: usize,
    episode_id: Option<String>,
    last_t: Option<usize>,
    fast: Option<usize>,
    slow: Option<usize>,
}

impl Combiner {
    pub fn new(dt: f64, k: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || k == 0 {
            return Err(Error::invalid("combiner needs dt > 0 and k >= 1"));
        }
        Ok(Self {
            dt,
            k,
            episode_id: None,
            last_t: None,
            fast: None,
            slow: None,
        })
    }

    /// Records a fast-detector flag. Only the earliest one counts.
    pub fn fast_flag(&mut self, step: usize) {
        self.fast = Some(self.fast.map_or(step, |f| f.min(step)));
    }

    pub fn push_event(&mut self, ev: &SlowVerdictEvent) -> Result<()> {
        ev.validate(self.k)?;
        match &self.episode_id {
            Some(id) if *id != ev.episode_id => {
                return Err(Error::invalid(format!(
                    "slow events mix episodes {id} and {}",
                    ev.episode_id
                )))
            }
            None => self.episode_id = Some(ev.episode_id.clone()),
            _ => {}
        }
        if self.last_t.is_some_and(|t| ev.t < t) {
            return Err(Error::invalid(format!("slow events not sorted by t at t={}", ev.t)));
        }
        self.last_t = Some(ev.t);
        if ev.verdict == SlowVerdict::Failure {
            let at = ev.arrival_step(self.dt, self.k);
            self.slow = Some(self.slow.map_or(at, |s| s.min(at)));
        }
        Ok(())
    }

    pub fn verdict(&self) -> CombinedVerdict {
        union(self.fast, self.slow)
    }
}

/// Logical OR of a fast verdict and slow events of the same episode.
pub fn combine(fast: &EpisodeVerdict, events: &[SlowVerdictEvent], dt: f64, k: usize) -> Result<CombinedVerdict> {
    let mut c = Combiner::new(dt, k)?;
    if let Some(step) = fast.detection_step {
        c.fast_flag(step);
    }
    for ev in events {
        c.push_event(ev)?;
    }
    Ok(c.verdict())
}

/// Scripted stand-in for a slow task-progress monitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StubRule {
    AlwaysOk,
    /// Failure when the net displacement since the previous query, computed
    /// from the executed actions, is below `threshold`.
    FlagIfStalled { threshold: f64 },
    /// Failure at every query with `t >= step`.
    FlagAfter { step: usize },
}

impl std::str::FromStr for StubRule {
    type Err = Error;

    /// `always_ok`, `flag_if_stalled:<threshold>` or `flag_after:<step>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::invalid(format!("invalid stub rule {s:?}"));
        let rule = match (name, arg) {
            ("always_ok", None) => StubRule::AlwaysOk,
            ("flag_if_stalled", Some(a)) => StubRule::FlagIfStalled {
                threshold: a.parse().map_err(|_| bad())?,
            },
            ("flag_after", Some(a)) => StubRule::FlagAfter {
                step: a.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl StubRule {
    pub fn validate(&self) -> Result<()> {
        if let StubRule::FlagIfStalled { threshold } = self {
            if !(*threshold >= 0.0 && threshold.is_finite()) {
                return Err(Error::invalid(format!("stall threshold {threshold} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubConfig {
    pub rule: StubRule,
    /// Queries per episode, spread evenly over its inference steps.
    pub queries: usize,
    pub latency_seconds: f64,
}

impl StubConfig {
    pub fn new(rule: StubRule) -> Self {
        Self {
            rule,
            queries: 2,
            latency_seconds: 0.0,
        }
    }
}

/// Inference-step indices at which the stub is queried: `⌊n·i/q⌋` for
/// `i = 1..=q`, without duplicates and without step 0.
pub fn query_steps(n: usize, queries: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=queries).map(|i| n * i / queries).filter(|&j| j > 0).collect();
    out.dedup();
    out
}

/// Deterministic slow-monitor events for `rollout`.
///
/// A query at inference step `j` sees the executed actions up to time `j·k`
/// and reports at `t = j·k`.
pub fn run_slow_stub(rollout: &Rollout, cfg: &StubConfig) -> Result<Vec<SlowVerdictEvent>> {
    cfg.rule.validate()?;
    if cfg.queries == 0 {
        return Err(Error::invalid("stub needs at least one query"));
    }
    if !(cfg.latency_seconds >= 0.0 && cfg.latency_seconds.is_finite()) {
        return Err(Error::invalid("stub latency must be non-negative"));
    }
    let k = rollout.header.k;
    let dt = rollout.header.dt;
    let mut events = Vec::new();
    let mut prev = 0;
    for j in query_steps(rollout.steps.len(), cfg.queries) {
        let t = j * k;
        let failed = match cfg.rule {
            StubRule::AlwaysOk => false,
            StubRule::FlagAfter { step } => t >= step,
            StubRule::FlagIfStalled { threshold } => {
                let mut disp = vec![0.0; rollout.header.d];
                for step in &rollout.steps[prev..j] {
                    for r in 0..step.executed.rows {
                        for (acc, v) in disp.iter_mut().zip(step.executed.row(r)) {
                            *acc += v * dt;
                        }
                    }
                }
                disp.iter().map(|v| v * v).sum::<f64>().sqrt() < threshold
            }
        };
        events.push(SlowVerdictEvent {
            episode_id: rollout.episode_id().to_string(),
            t,
            verdict: if failed { SlowVerdict::Failure } else { SlowVerdict::Ok },
            latency_seconds: cfg.latency_seconds,
        });
        prev = j;
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: usize, verdict: SlowVerdict, latency: f64) -> SlowVerdictEvent {
        SlowVerdictEvent {
            episode_id: "ep".into(),
            t,
            verdict,
            latency_seconds: latency,
        }
    }

    #[test]
    fn all_ok_is_not_flagged() {
        let v = combine(
            &EpisodeVerdict::ok(),
            &[ev(8, SlowVerdict::Ok, 0.0), ev(16, SlowVerdict::Ok, 0.0)],
            0.1,
            8,
        )
        .unwrap();
        assert_eq!(v.source, VerdictSource::None);
        assert!(!v.flagged && v.detection_step.is_none());
    }

    #[test]
    fn earliest_side_wins() {
        let fast = EpisodeVerdict::new(Some(16), 0.1);
        let v = combine(&fast, &[ev(40, SlowVerdict::Failure, 0.0)], 0.1, 8).unwrap();
        assert_eq!((v.detection_step, v.source), (Some(16), VerdictSource::Fast));

        let v = combine(&EpisodeVerdict::ok(), &[ev(24, SlowVerdict::Failure, 0.0)], 0.1, 8).unwrap();
        assert_eq!((v.detection_step, v.source), (Some(24), VerdictSource::Slow));

        let fast = EpisodeVerdict::new(Some(24), 0.1);
        let v = combine(&fast, &[ev(24, SlowVerdict::Failure, 0.0)], 0.1, 8).unwrap();
        assert_eq!((v.detection_step, v.source), (Some(24), VerdictSource::Both));
    }

    #[test]
    fn latency_rounds_up_to_inference_steps() {
        // k·dt = 0.8 s per inference step.
        assert_eq!(ev(24, SlowVerdict::Failure, 0.0).arrival_step(0.1, 8), 24);
        assert_eq!(ev(24, SlowVerdict::Failure, 0.8).arrival_step(0.1, 8), 32);
        assert_eq!(ev(24, SlowVerdict::Failure, 0.81).arrival_step(0.1, 8), 40);
        assert_eq!(ev(24, SlowVerdict::Failure, 0.05).arrival_step(0.1, 8), 32);
        let v = combine(&EpisodeVerdict::new(Some(32), 0.1), &[ev(16, SlowVerdict::Failure, 2.0)], 0.1, 8).unwrap();
        assert_eq!((v.detection_step, v.source), (Some(32), VerdictSource::Fast));
    }

    #[test]
    fn rejects_bad_event_streams() {
        let fast = EpisodeVerdict::ok();
        assert!(combine(&fast, &[ev(16, SlowVerdict::Ok, 0.0), ev(8, SlowVerdict::Ok, 0.0)], 0.1, 8).is_err());
        let mut other = ev(16, SlowVerdict::Ok, 0.0);
        other.episode_id = "other".into();
        assert!(combine(&fast, &[ev(8, SlowVerdict::Ok, 0.0), other], 0.1, 8).is_err());
        assert!(combine(&fast, &[ev(5, SlowVerdict::Ok, 0.0)], 0.1, 8).is_err());
        assert!(combine(&fast, &[ev(8, SlowVerdict::Ok, -1.0)], 0.1, 8).is_err());
    }

    #[test]
    fn query_cadence() {
        assert_eq!(query_steps(6, 2), vec![3, 6]);
        assert_eq!(query_steps(7, 2), vec![3, 7]);
        assert_eq!(query_steps(1, 2), vec![1]);
        assert_eq!(query_steps(12, 3), vec![4, 8, 12]);
    }

    #[test]
    fn wire_round_trip() {
        let events = vec![ev(8, SlowVerdict::Ok, 0.0), ev(16, SlowVerdict::Failure, 1.5)];
        let mut buf = Vec::new();
        write_events(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"episode_id":"ep","t":8,"verdict":"ok","latency_seconds":0.0}"#
        );
        assert_eq!(read_events(&buf[..]).unwrap(), events);
        let err = read_events(&b"\n{\"t\":1}\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn stub_rules_parse() {
        assert_eq!("always_ok".parse::<StubRule>().unwrap(), StubRule::AlwaysOk);
        assert_eq!(
            "flag_if_stalled:0.5".parse::<StubRule>().unwrap(),
            StubRule::FlagIfStalled { threshold: 0.5 }
        );
        assert_eq!("flag_after:24".parse::<StubRule>().unwrap(), StubRule::FlagAfter { step: 24 });
        for bad in ["flag_if_stalled", "flag_if_stalled:-1", "flag_after:x", "vlm"] {
            assert!(bad.parse::<StubRule>().is_err(), "{bad}");
        }
    }
}
