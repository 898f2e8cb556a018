//! From raw trajectories to feature sequences and cross-validation groups.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Channel, FeatureSet, ObservationVector, Trajectory, TrajectorySample, SAMPLE_PERIOD};

/// Default moving-average window (samples).
pub const DEFAULT_SMOOTH_WINDOW: usize = 10;

/// Event selection thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionCriteria {
    /// Events must last strictly longer than this (s).
    pub min_duration: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for ExtractionCriteria {
    fn default() -> Self {
        ExtractionCriteria {
            min_duration: 50.0,
            range_min: 0.1,
            range_max: 120.0,
        }
    }
}

/// A maximal stretch of car following inside one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarFollowingEvent {
    pub event_id: String,
    pub driver_id: String,
    pub samples: Vec<TrajectorySample>,
    pub duration: f64,
}

/// Centered moving average, truncated at the ends.
///
/// Element `k` averages indices `k - W/2 ..= k + (W-1)/2` clipped to the
/// series, so odd windows are symmetric and even windows lean one sample
/// into the past.
pub fn smooth_moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("smoothing window must be at least 1"));
    }
    if series.is_empty() {
        return Err(Error::invalid("cannot smooth an empty series"));
    }
    let n = series.len();
    let back = window / 2;
    let ahead = (window - 1) / 2;
    Ok((0..n)
        .map(|k| {
            let lo = k.saturating_sub(back);
            let hi = (k + ahead).min(n - 1);
            let slice = &series[lo..=hi];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect())
}

/// Central differences over `dt`, one-sided at the two ends.
pub fn central_difference(series: &[f64], dt: f64) -> Vec<f64> {
    let n = series.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|k| {
                if k == 0 {
                    (series[1] - series[0]) / dt
                } else if k == n - 1 {
                    (series[n - 1] - series[n - 2]) / dt
                } else {
                    (series[k + 1] - series[k - 1]) / (2.0 * dt)
                }
            })
            .collect(),
    }
}

/// Maximal runs with the range inside `[range_min, range_max]` lasting longer
/// than `min_duration`.
pub fn extract_events(traj: &Trajectory, min_duration: f64, range_min: f64, range_max: f64) -> Vec<CarFollowingEvent> {
    let samples = traj.samples();
    let in_range = |s: &TrajectorySample| (range_min..=range_max).contains(&s.gap());
    let mut events = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        if !in_range(&samples[start]) {
            start += 1;
            continue;
        }
        let mut end = start;
        while end + 1 < samples.len() && in_range(&samples[end + 1]) {
            end += 1;
        }
        let duration = samples[end].t - samples[start].t;
        if duration > min_duration {
            events.push(CarFollowingEvent {
                event_id: format!("{}#{}", traj.trajectory_id(), events.len()),
                driver_id: traj.driver_id().to_string(),
                samples: samples[start..=end].to_vec(),
                duration,
            });
        }
        start = end + 1;
    }
    events
}

pub fn extract_events_with(traj: &Trajectory, criteria: &ExtractionCriteria) -> Vec<CarFollowingEvent> {
    extract_events(traj, criteria.min_duration, criteria.range_min, criteria.range_max)
}

/// Smoothed channels and their derivatives for one event.
struct Signals {
    gap: Vec<f64>,
    rel_speed: Vec<f64>,
    rel_accel: Vec<f64>,
    host_speed: Vec<f64>,
    host_accel: Vec<f64>,
    jerk: Option<Vec<f64>>,
}

impl Signals {
    fn channel(&self, c: Channel) -> &[f64] {
        match c {
            Channel::Gap => &self.gap,
            Channel::RelSpeed => &self.rel_speed,
            Channel::RelAccel => &self.rel_accel,
            Channel::HostSpeed => &self.host_speed,
            Channel::Jerk => self.jerk.as_deref().expect("jerk computed when requested"),
        }
    }
}

/// Observation vectors for `fs`, in time order.
///
/// Range and both speeds are smoothed first; host acceleration, relative
/// acceleration and jerk are central differences of the smoothed signals.
/// Samples whose derivatives rely on one-sided differences are dropped: one
/// at each end, or two at each end when jerk is used.
pub fn build_features(event: &CarFollowingEvent, fs: FeatureSet, window: usize) -> Result<Vec<ObservationVector>> {
    let trim = fs.derivative_order();
    let n = event.samples.len();
    if n < 2 * trim + 1 {
        return Err(Error::invalid(format!(
            "event {} has {n} samples; feature set {fs} needs at least {}",
            event.event_id,
            2 * trim + 1
        )));
    }
    let raw = |f: fn(&TrajectorySample) -> f64| event.samples.iter().map(f).collect::<Vec<_>>();
    let gap = smooth_moving_average(&raw(|s| s.gap()), window)?;
    let host_speed = smooth_moving_average(&raw(|s| s.v_h), window)?;
    let lead_speed = smooth_moving_average(&raw(|s| s.v_l), window)?;
    let rel_speed: Vec<f64> = lead_speed.iter().zip(&host_speed).map(|(l, h)| l - h).collect();
    let host_accel = central_difference(&host_speed, SAMPLE_PERIOD);
    let rel_accel = central_difference(&rel_speed, SAMPLE_PERIOD);
    let jerk = (trim == 2).then(|| central_difference(&host_accel, SAMPLE_PERIOD));
    let signals = Signals {
        gap,
        rel_speed,
        rel_accel,
        host_speed,
        host_accel,
        jerk,
    };
    let channels: Vec<&[f64]> = fs.channels().iter().map(|&c| signals.channel(c)).collect();
    Ok((trim..n - trim)
        .map(|k| ObservationVector {
            z: channels.iter().map(|c| c[k]).collect(),
            a: signals.host_accel[k],
            t: event.samples[k].t,
            event_id: event.event_id.clone(),
        })
        .collect())
}

/// Events split into disjoint groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub m_groups: usize,
    pub groups: Vec<Vec<String>>,
}

/// Shuffles `0..count` with the seed and deals the indices round-robin into
/// `m_groups` groups.
pub fn partition_indices(count: usize, m_groups: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m_groups < 2 {
        return Err(Error::invalid("need at least 2 groups"));
    }
    if count < 2 {
        return Err(Error::invalid(format!("need at least 2 events to partition, got {count}")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); m_groups];
    for (k, idx) in order.into_iter().enumerate() {
        groups[k % m_groups].push(idx);
    }
    Ok(groups)
}

/// Whole events dealt into `m_groups` groups; deterministic in `seed`.
pub fn partition_events(events: &[CarFollowingEvent], m_groups: usize, seed: u64) -> Result<GroupPartition> {
    let groups = partition_indices(events.len(), m_groups, seed)?;
    Ok(GroupPartition {
        m_groups,
        groups: groups
            .into_iter()
            .map(|g| g.into_iter().map(|i| events[i].event_id.clone()).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn traj_from_gaps(gaps: &[f64]) -> Trajectory {
        let samples = gaps
            .iter()
            .enumerate()
            .map(|(k, g)| TrajectorySample {
                t: k as f64 * SAMPLE_PERIOD,
                x_h: 0.0,
                v_h: 10.0,
                x_l: *g,
                v_l: 10.0,
            })
            .collect();
        Trajectory::new("drv", "trip", samples).unwrap()
    }

    fn event(samples: Vec<TrajectorySample>) -> CarFollowingEvent {
        let duration = samples.last().unwrap().t - samples[0].t;
        CarFollowingEvent {
            event_id: "ev".into(),
            driver_id: "drv".into(),
            samples,
            duration,
        }
    }

    #[test]
    fn smoothing_keeps_constants() {
        assert_eq!(smooth_moving_average(&[2.0; 4], 3).unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn smoothing_truncates_at_boundaries() {
        let out = smooth_moving_average(&[0.0, 1.0, 2.0, 3.0, 4.0], 3).unwrap();
        assert_eq!(out, vec![0.5, 1.0, 2.0, 3.0, 3.5]);
    }

    #[test]
    fn smoothing_rejects_bad_arguments() {
        assert!(smooth_moving_average(&[1.0], 0).is_err());
        assert!(smooth_moving_average(&[], 3).is_err());
    }

    #[test]
    fn out_of_range_trajectory_has_no_events() {
        assert!(extract_events(&traj_from_gaps(&[200.0; 1000]), 50.0, 0.1, 120.0).is_empty());
    }

    #[test]
    fn embedded_run_becomes_one_event() {
        // 10 s out of range, 60 s (601 samples) in range, 10 s out again.
        let mut gaps = vec![150.0; 100];
        gaps.extend((0..=600).map(|k| 10.0 + 20.0 * (k as f64 / 600.0)));
        gaps.extend(vec![150.0; 100]);
        let events = extract_events(&traj_from_gaps(&gaps), 50.0, 0.1, 120.0);
        assert_eq!(events.len(), 1);
        assert!((events[0].duration - 60.0).abs() < 1e-9);
        assert_eq!(events[0].samples.len(), 601);
        assert!(events[0].samples.iter().all(|s| (10.0..=30.0).contains(&s.gap())));
    }

    #[test]
    fn short_run_is_dropped() {
        let mut gaps = vec![150.0; 10];
        gaps.extend(vec![20.0; 401]);
        gaps.extend(vec![150.0; 10]);
        assert!(extract_events(&traj_from_gaps(&gaps), 50.0, 0.1, 120.0).is_empty());
    }

    #[test]
    fn steady_state_features_are_zero() {
        let samples: Vec<_> = (0..50)
            .map(|k| {
                let t = k as f64 * SAMPLE_PERIOD;
                TrajectorySample { t, x_h: 15.0 * t, v_h: 15.0, x_l: 15.0 * t + 30.0, v_l: 15.0 }
            })
            .collect();
        let feats = build_features(&event(samples), FeatureSet::Z1, DEFAULT_SMOOTH_WINDOW).unwrap();
        assert_eq!(feats.len(), 48);
        for o in &feats {
            assert_eq!(o.z[1], 0.0);
            assert_eq!(o.a, 0.0);
            assert!((o.z[0] - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_acceleration_is_recovered_exactly() {
        let samples: Vec<_> = (0..100)
            .map(|k| {
                let t = k as f64 * SAMPLE_PERIOD;
                TrajectorySample {
                    t,
                    x_h: 5.0 * t + 0.5 * t * t,
                    v_h: 5.0 + t,
                    x_l: 5.0 * t + 0.5 * t * t + 40.0,
                    v_l: 5.0 + t,
                }
            })
            .collect();
        let feats = build_features(&event(samples), FeatureSet::Z2, 1).unwrap();
        for o in &feats {
            assert!((o.a - 1.0).abs() < 1e-9, "a = {}", o.a);
        }
    }

    #[test]
    fn trims_depend_on_derivative_order() {
        let samples: Vec<_> = (0..30)
            .map(|k| {
                let t = k as f64 * SAMPLE_PERIOD;
                TrajectorySample { t, x_h: 0.0, v_h: 1.0 + 0.1 * (t * 3.0).sin(), x_l: 20.0, v_l: 2.0 }
            })
            .collect();
        let ev = event(samples);
        for fs in FeatureSet::ALL {
            let feats = build_features(&ev, fs, 3).unwrap();
            let trim = if fs == FeatureSet::Z4 { 2 } else { 1 };
            assert_eq!(feats.len(), 30 - 2 * trim);
            assert!((feats[0].t - trim as f64 * SAMPLE_PERIOD).abs() < 1e-12);
            assert!(feats.iter().all(|o| o.z.len() == fs.input_dim()));
        }
        let tiny = event(ev.samples[..4].to_vec());
        assert!(build_features(&tiny, FeatureSet::Z4, 1).is_err());
        assert!(build_features(&tiny, FeatureSet::Z3, 1).is_ok());
    }

    #[test]
    fn singleton_groups_when_counts_match() {
        let g = partition_indices(20, 20, 7).unwrap();
        assert!(g.iter().all(|grp| grp.len() == 1));
        assert_eq!(g, partition_indices(20, 20, 7).unwrap());
    }

    #[test]
    fn uneven_counts_spread_by_at_most_one() {
        let g = partition_indices(45, 20, 3).unwrap();
        assert!(g.iter().all(|grp| grp.len() == 2 || grp.len() == 3));
        let all: HashSet<usize> = g.iter().flatten().copied().collect();
        assert_eq!(all.len(), 45);
        assert_eq!(g.iter().map(Vec::len).sum::<usize>(), 45);
    }

    #[test]
    fn partition_argument_errors() {
        assert!(partition_indices(1, 20, 0).is_err());
        assert!(partition_indices(10, 1, 0).is_err());
    }
}
