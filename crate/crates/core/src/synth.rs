//! Synthetic car-following corpora: IDM followers behind scripted leads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Trajectory, TrajectorySample, SAMPLE_PERIOD};

/// Physical acceleration envelope of generated drivers (m/s²).
pub const ACCEL_LIMIT: f64 = 8.0;

const MAX_RETRIES: usize = 5;
const RETRY_GAP_STEP: f64 = 10.0;

/// Intelligent Driver Model parameters of one synthetic driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub time_headway: f64,
    /// Maximum acceleration (m/s²).
    pub a_max: f64,
    /// Comfortable deceleration (m/s²).
    pub b: f64,
    /// Jam distance (m).
    pub s0: f64,
    pub delta: f64,
    /// Standard deviation of white acceleration noise (m/s²).
    pub accel_noise_std: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            v0: 33.0,
            time_headway: 1.5,
            a_max: 1.4,
            b: 2.0,
            s0: 2.0,
            delta: 4.0,
            accel_noise_std: 0.3,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.v0, self.time_headway, self.a_max, self.b, self.s0, self.delta];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("IDM parameters must be positive and finite"));
        }
        if !(self.accel_noise_std >= 0.0) || !self.accel_noise_std.is_finite() {
            return Err(Error::invalid("acceleration noise must be non-negative"));
        }
        Ok(())
    }

    /// Gap at which steady following at speed `v` needs no acceleration.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        (self.s0 + v * self.time_headway) / free.max(1e-6).sqrt()
    }
}

/// IDM acceleration for host speed `v_h`, relative speed `dv = v_l - v_h`
/// and `gap`, clamped to ±[`ACCEL_LIMIT`].
///
/// The dynamic part of the desired gap is floored at zero, so a lead pulling
/// away never pushes the desired gap below the jam distance.
pub fn idm_accel(v_h: f64, dv: f64, gap: f64, p: &IdmParams) -> Result<f64> {
    if !(gap > 0.0) {
        return Err(Error::invalid(format!("gap {gap} m: vehicles have collided")));
    }
    let interaction = v_h * p.time_headway - v_h * dv / (2.0 * (p.a_max * p.b).sqrt());
    let desired = p.s0 + interaction.max(0.0);
    let a = p.a_max * (1.0 - (v_h / p.v0).powf(p.delta) - (desired / gap).powi(2));
    Ok(a.clamp(-ACCEL_LIMIT, ACCEL_LIMIT))
}

/// Lead speed as a piecewise-linear function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadProfile {
    /// `(t, v)` waypoints with strictly increasing `t`, starting at 0.
    pub waypoints: Vec<(f64, f64)>,
}

impl LeadProfile {
    pub fn new(waypoints: Vec<(f64, f64)>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::invalid("a lead profile needs at least two waypoints"));
        }
        if waypoints[0].0 != 0.0 {
            return Err(Error::invalid("a lead profile starts at t = 0"));
        }
        if waypoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid("lead profile times must increase"));
        }
        if waypoints.iter().any(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("lead speeds must be finite and non-negative"));
        }
        Ok(LeadProfile { waypoints })
    }

    /// Constant lead speed for `duration` seconds.
    pub fn constant(speed: f64, duration: f64) -> Result<Self> {
        LeadProfile::new(vec![(0.0, speed), (duration, speed)])
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().expect("validated non-empty").0
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        let w = &self.waypoints;
        if t <= w[0].0 {
            return w[0].1;
        }
        for pair in w.windows(2) {
            let ((t0, v0), (t1, v1)) = (pair[0], pair[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        w[w.len() - 1].1
    }

    /// Random lead: holds a speed for 3–8 s, then ramps to a new target in
    /// `[v_lo, v_hi]` at no more than 1.5 m/s².
    pub fn random<R: Rng>(rng: &mut R, duration: f64, v_lo: f64, v_hi: f64) -> Result<Self> {
        let mut v = rng.random_range(v_lo..=v_hi);
        let mut t = 0.0;
        let mut waypoints = vec![(0.0, v)];
        while t < duration {
            t += rng.random_range(3.0..8.0);
            waypoints.push((t, v));
            let target = rng.random_range(v_lo..=v_hi);
            t += ((target - v).abs() / 1.5).max(1.0);
            v = target;
            waypoints.push((t, v));
        }
        let full = LeadProfile::new(waypoints)?;
        let mut clipped: Vec<(f64, f64)> = full.waypoints.iter().copied().filter(|(t, _)| *t < duration).collect();
        clipped.push((duration, full.speed_at(duration)));
        LeadProfile::new(clipped)
    }
}

/// Follows `lead` starting at its initial speed and `initial_gap`, integrating
/// with explicit Euler at [`SAMPLE_PERIOD`].
pub fn simulate_episode<R: Rng>(
    params: &IdmParams,
    lead: &LeadProfile,
    initial_gap: f64,
    rng: &mut R,
) -> Result<Vec<TrajectorySample>> {
    let noise = Normal::new(0.0, params.accel_noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let steps = (lead.duration() / SAMPLE_PERIOD).round() as usize;
    let mut v_l = lead.speed_at(0.0);
    let mut v_h = v_l;
    let mut x_h = 0.0;
    let mut x_l = initial_gap;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * SAMPLE_PERIOD;
        out.push(TrajectorySample { t, x_h, v_h, x_l, v_l });
        let gap = x_l - x_h;
        let a = (idm_accel(v_h, v_l - v_h, gap, params)? + noise.sample(rng)).clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
        x_h += v_h * SAMPLE_PERIOD;
        x_l += v_l * SAMPLE_PERIOD;
        v_h = (v_h + a * SAMPLE_PERIOD).max(0.0);
        v_l = lead.speed_at(t + SAMPLE_PERIOD);
        if x_l - x_h <= 0.0 {
            return Err(Error::invalid(format!("collision at t = {:.1} s", t + SAMPLE_PERIOD)));
        }
    }
    Ok(out)
}

/// Ground truth written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub drivers: Vec<DriverManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverManifest {
    pub driver_id: String,
    pub idm: IdmParams,
    pub trajectories: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub trajectories: Vec<Trajectory>,
    pub manifest: CorpusManifest,
}

pub fn driver_id(index: usize) -> String {
    format!("driver{index:02}")
}

fn episode_seed(seed: u64, driver: usize, episode: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((driver as u64) << 32) | episode as u64);
    rng.random()
}

/// One trajectory per (driver, episode). Episode `e` of driver `d` follows
/// `lead_profiles[(d * events_per_driver + e) % len]`, starting at the
/// driver's equilibrium gap; collisions retry with a larger initial gap.
pub fn generate_corpus(
    n_drivers: usize,
    events_per_driver: usize,
    lead_profiles: &[LeadProfile],
    params_per_driver: &[IdmParams],
    seed: u64,
) -> Result<Corpus> {
    if params_per_driver.len() != n_drivers {
        return Err(Error::invalid(format!(
            "{} parameter sets for {n_drivers} drivers",
            params_per_driver.len()
        )));
    }
    if lead_profiles.is_empty() {
        return Err(Error::invalid("at least one lead profile is required"));
    }
    for p in params_per_driver {
        p.validate()?;
    }
    let mut trajectories = Vec::with_capacity(n_drivers * events_per_driver);
    let mut drivers = Vec::with_capacity(n_drivers);
    for (d, params) in params_per_driver.iter().enumerate() {
        let id = driver_id(d);
        let mut ids = Vec::with_capacity(events_per_driver);
        for e in 0..events_per_driver {
            let lead = &lead_profiles[(d * events_per_driver + e) % lead_profiles.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, d, e));
            let mut gap = params.equilibrium_gap(lead.speed_at(0.0));
            let mut attempt = 0;
            let samples = loop {
                match simulate_episode(params, lead, gap, &mut rng) {
                    Ok(s) => break s,
                    Err(err) if attempt < MAX_RETRIES => {
                        log::debug!("{id} episode {e}: {err}; retrying with a larger gap");
                        attempt += 1;
                        gap += RETRY_GAP_STEP;
                    }
                    Err(err) => return Err(err),
                }
            };
            let traj_id = format!("{id}-ep{e:03}");
            trajectories.push(Trajectory::new(&id, &traj_id, samples)?);
            ids.push(traj_id);
        }
        drivers.push(DriverManifest {
            driver_id: id,
            idm: *params,
            trajectories: ids,
        });
    }
    Ok(Corpus {
        trajectories,
        manifest: CorpusManifest { seed, drivers },
    })
}

/// Distinct, plausible driver personalities drawn from the seed.
pub fn random_driver_params(n: usize, noise_std: f64, seed: u64) -> Vec<IdmParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d71e);
    (0..n)
        .map(|_| IdmParams {
            v0: rng.random_range(30.0..38.0),
            time_headway: rng.random_range(0.9..2.2),
            a_max: rng.random_range(0.8..2.0),
            b: rng.random_range(1.5..3.0),
            s0: rng.random_range(1.5..3.5),
            delta: 4.0,
            accel_noise_std: noise_std,
        })
        .collect()
}

/// `count` random lead profiles of `duration` seconds at 5–25 m/s.
pub fn random_lead_profiles(count: usize, duration: f64, seed: u64) -> Result<Vec<LeadProfile>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1ead_0001);
    (0..count).map(|_| LeadProfile::random(&mut rng, duration, 5.0, 25.0)).collect()
}
