//! Time-indexed per-node demand.
//!
//! CSV layout (one row per node per time step, rows grouped by timestamp):
//!
//! ```text
//! # load-profile v1
//! timestamp,node_id,p_watt,power_factor
//! 0,R1,2310.5,0.95
//! 0,R2,1804.0,0.97
//! 15,R1,2280.1,0.95
//! ```
//!
//! `timestamp` is in whole minutes from the start of the record. Negative
//! `p_watt` is export (e.g. rooftop PV).

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Network, NodeInjection};

pub const PROFILE_VERSION_LINE: &str = "# load-profile v1";
const HEADER: [&str; 4] = ["timestamp", "node_id", "p_watt", "power_factor"];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("schema error at row {row}: {reason}")]
    Schema { row: usize, reason: String },
    #[error("time-series gap at row {row}: {reason}")]
    Gap { row: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub node_ids: Vec<String>,
    pub resolution_min: u32,
    pub timestamps: Vec<i64>,
    /// Active demand in watts, indexed `[step][node]`.
    pub p_w: Vec<Vec<f64>>,
    /// Power factor, indexed `[step][node]`.
    pub pf: Vec<Vec<f64>>,
}

impl LoadProfile {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.resolution_min) as usize
    }

    pub fn days(&self) -> usize {
        self.len() / self.steps_per_day()
    }

    pub fn dt_hours(&self) -> f64 {
        self.resolution_min as f64 / 60.0
    }

    pub fn column(&self, node_id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == node_id)
    }

    /// Demand injections for every network node at step `t`. Network nodes
    /// missing from the profile get zero demand.
    pub fn injections(&self, net: &Network, t: usize) -> Vec<NodeInjection> {
        net.nodes()
            .iter()
            .map(|n| match self.column(&n.id) {
                Some(c) => NodeInjection::from_pf(self.p_w[t][c], self.pf[t][c]),
                None => NodeInjection::default(),
            })
            .collect()
    }

    /// Sub-profile covering whole days `[first, first + count)`.
    pub fn days_slice(&self, first: usize, count: usize) -> LoadProfile {
        let spd = self.steps_per_day();
        let a = (first * spd).min(self.len());
        let b = ((first + count) * spd).min(self.len());
        LoadProfile {
            node_ids: self.node_ids.clone(),
            resolution_min: self.resolution_min,
            timestamps: self.timestamps[a..b].to_vec(),
            p_w: self.p_w[a..b].to_vec(),
            pf: self.pf[a..b].to_vec(),
        }
    }

    /// Multiplies every demand by `factor`.
    pub fn scaled(&self, factor: f64) -> LoadProfile {
        let mut out = self.clone();
        for row in &mut out.p_w {
            for p in row {
                *p *= factor;
            }
        }
        out
    }
}

pub fn load_profiles(path: &Path) -> Result<LoadProfile, ProfileError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    parse_profiles(&text)
}

pub fn parse_profiles(text: &str) -> Result<LoadProfile, ProfileError> {
    let mut lines = text.splitn(2, '\n');
    let first = lines.next().unwrap_or("").trim_end_matches('\r');
    if first.trim() != PROFILE_VERSION_LINE {
        return Err(ProfileError::Schema {
            row: 0,
            reason: format!("first line must be `{PROFILE_VERSION_LINE}`"),
        });
    }
    let body = lines.next().unwrap_or("");
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let header = rdr.headers().map_err(|e| ProfileError::Schema { row: 1, reason: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(ProfileError::Schema {
            row: 1,
            reason: format!("header must be `{}`", HEADER.join(",")),
        });
    }

    let mut node_ids: Vec<String> = Vec::new();
    let mut timestamps: Vec<i64> = Vec::new();
    let mut p_w: Vec<Vec<f64>> = Vec::new();
    let mut pf: Vec<Vec<f64>> = Vec::new();
    let mut block: Vec<(String, f64, f64)> = Vec::new();
    let mut block_ts: Option<i64> = None;
    let mut step: Option<i64> = None;

    let mut close_block = |ts: i64,
                           block: &mut Vec<(String, f64, f64)>,
                           row: usize,
                           node_ids: &mut Vec<String>|
     -> Result<(), ProfileError> {
        if timestamps.is_empty() {
            *node_ids = block.iter().map(|b| b.0.clone()).collect();
        }
        if block.len() != node_ids.len() {
            return Err(ProfileError::Gap {
                row,
                reason: format!(
                    "timestamp {ts} has {} nodes, expected {}",
                    block.len(),
                    node_ids.len()
                ),
            });
        }
        let mut p_row = vec![0.0; node_ids.len()];
        let mut pf_row = vec![1.0; node_ids.len()];
        for (id, p, f) in block.drain(..) {
            let col = node_ids.iter().position(|n| *n == id).ok_or_else(|| ProfileError::Gap {
                row,
                reason: format!("node `{id}` missing from earlier timestamps"),
            })?;
            p_row[col] = p;
            pf_row[col] = f;
        }
        timestamps.push(ts);
        p_w.push(p_row);
        pf.push(pf_row);
        Ok(())
    };

    let mut last_row = 1;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        last_row = row;
        let rec = rec.map_err(|e| ProfileError::Schema { row, reason: e.to_string() })?;
        if rec.len() != 4 {
            return Err(ProfileError::Schema { row, reason: "expected 4 fields".into() });
        }
        let ts: i64 = rec[0]
            .parse()
            .map_err(|_| ProfileError::Schema { row, reason: "timestamp must be integer minutes".into() })?;
        let p: f64 = rec[2]
            .parse()
            .map_err(|_| ProfileError::Schema { row, reason: "p_watt must be a number".into() })?;
        let f: f64 = rec[3]
            .parse()
            .map_err(|_| ProfileError::Schema { row, reason: "power_factor must be a number".into() })?;
        if !p.is_finite() || !(f > 0.0 && f <= 1.0) {
            return Err(ProfileError::Schema { row, reason: "power must be finite, pf in (0, 1]".into() });
        }
        let id = rec[1].to_string();

        match block_ts {
            Some(cur) if cur == ts => {}
            Some(cur) => {
                if ts <= cur {
                    return Err(ProfileError::Gap {
                        row,
                        reason: format!("timestamp {ts} repeats or goes backwards after {cur}"),
                    });
                }
                let d = ts - cur;
                match step {
                    None => step = Some(d),
                    Some(s) if s != d => {
                        return Err(ProfileError::Gap {
                            row,
                            reason: format!("step {d} min differs from {s} min"),
                        })
                    }
                    _ => {}
                }
                close_block(cur, &mut block, row, &mut node_ids)?;
                block_ts = Some(ts);
            }
            None => block_ts = Some(ts),
        }
        if block.iter().any(|b| b.0 == id) {
            return Err(ProfileError::Gap {
                row,
                reason: format!("duplicated timestamp {ts} for node `{id}`"),
            });
        }
        block.push((id, p, f));
    }
    let Some(ts) = block_ts else {
        return Err(ProfileError::Schema { row: last_row, reason: "no data rows".into() });
    };
    close_block(ts, &mut block, last_row + 1, &mut node_ids)?;

    let resolution_min = match step {
        Some(s) if s > 0 && s <= 24 * 60 && (24 * 60) % s == 0 => s as u32,
        Some(s) => {
            return Err(ProfileError::Schema {
                row: 2,
                reason: format!("resolution {s} min does not divide a day"),
            })
        }
        None => 15,
    };
    Ok(LoadProfile { node_ids, resolution_min, timestamps, p_w, pf })
}

pub fn write_profiles(profile: &LoadProfile) -> String {
    let mut out = String::with_capacity(profile.len() * profile.node_ids.len() * 24);
    out.push_str(PROFILE_VERSION_LINE);
    out.push('\n');
    out.push_str(&HEADER.join(","));
    out.push('\n');
    for (t, ts) in profile.timestamps.iter().enumerate() {
        for (c, id) in profile.node_ids.iter().enumerate() {
            out.push_str(&format!("{ts},{id},{},{}\n", profile.p_w[t][c], profile.pf[t][c]));
        }
    }
    out
}

/// Parameters of the seedable synthetic residential profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfileConfig {
    pub days: usize,
    pub resolution_min: u32,
    /// Per-node evening peak drawn uniformly from this range, watts.
    pub peak_w: (f64, f64),
    /// Day-to-day multiplicative spread (uniform ±).
    pub day_spread: f64,
    /// Standard deviation of the AR(1) multiplicative noise.
    pub noise: f64,
    /// Per-node power factor drawn uniformly from this range.
    pub pf: (f64, f64),
    /// Midday PV export peak per node, watts (0 disables).
    pub pv_peak_w: f64,
}

impl Default for SyntheticProfileConfig {
    fn default() -> Self {
        Self {
            days: 30,
            resolution_min: 15,
            peak_w: (14_000.0, 22_000.0),
            day_spread: 0.12,
            noise: 0.06,
            pf: (0.93, 0.98),
            pv_peak_w: 0.0,
        }
    }
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    let d = (h - centre) / width;
    (-0.5 * d * d).exp()
}

/// Diurnal household shape normalised to ~1 at the evening peak.
fn daily_shape(h: f64) -> f64 {
    0.22 + 0.28 * bump(h, 7.5, 1.1) + 0.12 * bump(h, 13.0, 2.0) + 0.78 * bump(h, 19.25, 1.6)
}

/// Synthetic residential demand: diurnal shape with morning and evening
/// peaks, per-day scaling and AR(1) noise, optionally with midday PV.
pub fn synthetic_profile(
    node_ids: &[String],
    cfg: &SyntheticProfileConfig,
    seed: u64,
) -> LoadProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spd = (24 * 60 / cfg.resolution_min) as usize;
    let steps = cfg.days * spd;
    let peaks: Vec<f64> =
        node_ids.iter().map(|_| rng.random_range(cfg.peak_w.0..=cfg.peak_w.1)).collect();
    let pfs: Vec<f64> = node_ids.iter().map(|_| rng.random_range(cfg.pf.0..=cfg.pf.1)).collect();
    let shift: Vec<f64> = node_ids.iter().map(|_| rng.random_range(-0.5..=0.5)).collect();
    let day_factor: Vec<f64> =
        (0..cfg.days).map(|_| 1.0 + rng.random_range(-cfg.day_spread..=cfg.day_spread)).collect();
    let normal = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let mut ar = vec![0.0; node_ids.len()];

    let mut p_w = Vec::with_capacity(steps);
    let mut pf = Vec::with_capacity(steps);
    let mut timestamps = Vec::with_capacity(steps);
    for t in 0..steps {
        let day = t / spd;
        let h = (t % spd) as f64 * cfg.resolution_min as f64 / 60.0;
        let mut row = Vec::with_capacity(node_ids.len());
        for c in 0..node_ids.len() {
            ar[c] = 0.8 * ar[c] + normal.sample(&mut rng);
            let load = peaks[c] * daily_shape(h - shift[c]) * day_factor[day] * (1.0 + ar[c]);
            let pv = cfg.pv_peak_w * (bump(h, 12.5, 2.2) - 0.011).max(0.0);
            row.push(load.max(0.0) - pv);
        }
        p_w.push(row);
        pf.push(pfs.clone());
        timestamps.push(t as i64 * cfg.resolution_min as i64);
    }
    LoadProfile {
        node_ids: node_ids.to_vec(),
        resolution_min: cfg.resolution_min,
        timestamps,
        p_w,
        pf,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day_csv() -> String {
        let mut s = format!("{PROFILE_VERSION_LINE}\ntimestamp,node_id,p_watt,power_factor\n");
        for t in 0..96 {
            s.push_str(&format!("{},A,{},0.95\n", t * 15, 1000.0 + t as f64));
            s.push_str(&format!("{},B,{},1.0\n", t * 15, -200.0));
        }
        s
    }

    #[test]
    fn reads_a_full_day() {
        let p = parse_profiles(&day_csv()).unwrap();
        assert_eq!(p.len(), 96);
        assert_eq!(p.resolution_min, 15);
        assert_eq!(p.node_ids, ["A", "B"]);
        assert_eq!(p.p_w[3][0], 1003.0);
        // PV export rows are accepted as negative demand
        assert_eq!(p.p_w[0][1], -200.0);
    }

    #[test]
    fn duplicated_timestamp_is_a_gap() {
        let text = day_csv().replace("15,B,", "15,A,");
        assert!(matches!(parse_profiles(&text), Err(ProfileError::Gap { row: 5, .. })));
        let mut text = day_csv();
        text.push_str("1425,A,1.0,1.0\n");
        assert!(matches!(parse_profiles(&text), Err(ProfileError::Gap { .. })));
    }

    #[test]
    fn non_uniform_step_is_a_gap() {
        let text = day_csv().replace("\n30,A,", "\n35,A,").replace("\n30,B,", "\n35,B,");
        assert!(matches!(parse_profiles(&text), Err(ProfileError::Gap { .. })));
    }

    #[test]
    fn missing_node_is_a_gap() {
        let text = day_csv().replace("45,B,-200,1.0\n", "");
        assert!(matches!(parse_profiles(&text), Err(ProfileError::Gap { .. })));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(parse_profiles("timestamp,node_id\n"), Err(ProfileError::Schema { .. })));
        let text = day_csv().replace("0.95", "1.5");
        assert!(matches!(parse_profiles(&text), Err(ProfileError::Schema { .. })));
        let text = day_csv().replace("p_watt", "kw");
        assert!(matches!(parse_profiles(&text), Err(ProfileError::Schema { row: 1, .. })));
    }

    #[test]
    fn round_trip_and_synthetic_determinism() {
        let ids: Vec<String> = ["R1", "R2", "R3"].iter().map(|s| s.to_string()).collect();
        let cfg = SyntheticProfileConfig { days: 2, ..Default::default() };
        let a = synthetic_profile(&ids, &cfg, 7);
        let b = synthetic_profile(&ids, &cfg, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 192);
        assert_eq!(a.days(), 2);
        let back = parse_profiles(&write_profiles(&a)).unwrap();
        assert_eq!(back, a);
        assert_ne!(synthetic_profile(&ids, &cfg, 8), a);
    }
}
