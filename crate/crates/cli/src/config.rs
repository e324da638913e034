//! Experiment configuration. Every physical quantity carries its unit in
//! the key name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::AppError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkSection,
    pub profile: ProfileSection,
    pub ess: EssSection,
    pub band: BandSection,
    pub estimator: EstimatorSection,
    pub rl: RlSection,
    pub coordination: CoordinationSection,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: NetworkSection::default(),
            profile: ProfileSection::default(),
            ess: EssSection::default(),
            band: BandSection::default(),
            estimator: EstimatorSection::default(),
            rl: RlSection::default(),
            coordination: CoordinationSection::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Topology file; empty selects the built-in CIGRE LV residential feeder.
    pub topology_path: Option<PathBuf>,
    pub slack_voltage_pu: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { topology_path: None, slack_voltage_pu: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// Measured profile CSV; when absent a synthetic profile is generated.
    pub path: Option<PathBuf>,
    /// Total days (synthetic only). The last `test_days` are held out.
    pub days: usize,
    pub test_days: usize,
    pub resolution_min: u32,
    pub peak_min_kw: f64,
    pub peak_max_kw: f64,
    pub day_spread: f64,
    pub noise: f64,
    pub pv_peak_kw: f64,
    /// Multiplier on every demand, measured or synthetic.
    pub load_scale: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            path: None,
            days: 31,
            test_days: 1,
            resolution_min: 15,
            peak_min_kw: 14.0,
            peak_max_kw: 22.0,
            day_spread: 0.12,
            noise: 0.06,
            pv_peak_kw: 0.0,
            load_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EssSection {
    pub nodes: Vec<String>,
    pub p_max_kw: f64,
    pub e_rated_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub power_factor: f64,
}

impl Default for EssSection {
    fn default() -> Self {
        Self {
            nodes: vec!["R9".into(), "R14".into(), "R16".into()],
            p_max_kw: 60.0,
            e_rated_kwh: 3000.0,
            soc_min: 0.1,
            soc_max: 0.9,
            soc_init: 0.5,
            power_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandSection {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
}

impl Default for BandSection {
    fn default() -> Self {
        Self { v_min_pu: 0.95, v_max_pu: 1.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    /// Training-history days with random ESS actions.
    pub history_days: usize,
    pub idle_fraction: f64,
    pub corrector_v_low_pu: f64,
    pub corrector_v_high_pu: f64,
    pub corrector_order: usize,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            history_days: 30,
            idle_fraction: 0.25,
            corrector_v_low_pu: 0.975,
            corrector_v_high_pu: 1.0,
            corrector_order: 3,
            encoder_epochs: 60,
            encoder_lr: 1e-3,
            batch_size: 64,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub updates: usize,
    pub gamma: f64,
    pub clip: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_steps: usize,
    pub gae: bool,
    pub relax_low_pu: f64,
    pub relax_high_pu: f64,
    pub penalty: f64,
    /// Cost per unit of rated power.
    pub price_per_rated: f64,
    /// Node used for the local-vs-central training comparison.
    pub compare_node: String,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            updates: 150,
            gamma: 0.5,
            clip: 0.2,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            epochs: 10,
            minibatch: 64,
            rollout_steps: 384,
            gae: false,
            relax_low_pu: 0.02,
            relax_high_pu: 0.02,
            penalty: 100.0,
            price_per_rated: 1.0,
            compare_node: "R9".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordinationSection {
    pub beta: f64,
    /// Node ids per neighbourhood; empty means one neighbourhood of all ESS.
    pub neighborhoods: Vec<Vec<String>>,
    pub surrogate_degree: usize,
    pub surrogate_days: usize,
    pub dither_probability: f64,
    pub trust_radius_frac: f64,
    pub max_iter: usize,
    pub penalty_weight: f64,
    /// Band narrowing that absorbs surrogate error, p.u.
    pub band_margin_pu: f64,
    pub beta_sweep: Vec<f64>,
    pub controller: ControllerKind,
    /// `peak_charging` charges at rated power whenever the node's
    /// uncontrolled voltage on the test day is below this.
    pub peak_charging_below_pu: f64,
}

/// Where online agents take their intended actions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Learned,
    /// Scripted coincident charging at peak load, a deliberate conflict.
    PeakCharging,
}

impl Default for CoordinationSection {
    fn default() -> Self {
        Self {
            beta: 1.0,
            neighborhoods: Vec::new(),
            surrogate_degree: 4,
            surrogate_days: 10,
            dither_probability: 0.5,
            trust_radius_frac: 0.1,
            max_iter: 50,
            penalty_weight: 1e4,
            band_margin_pu: 0.015,
            beta_sweep: (1..=10).map(|i| i as f64 / 10.0).collect(),
            controller: ControllerKind::Learned,
            peak_charging_below_pu: 0.975,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, AppError> {
        let cfg: Self = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Neighbourhoods as ESS indices.
    pub fn neighborhood_indices(&self) -> Result<Vec<Vec<usize>>, AppError> {
        if self.coordination.neighborhoods.is_empty() {
            return Ok(vec![(0..self.ess.nodes.len()).collect()]);
        }
        self.coordination
            .neighborhoods
            .iter()
            .map(|nb| {
                nb.iter()
                    .map(|id| {
                        self.ess.nodes.iter().position(|n| n == id).ok_or_else(|| {
                            AppError::Config(format!("neighbourhood member {id} has no ESS"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let bad = |m: String| Err(AppError::Config(m));
        if !(self.band.v_min_pu < self.band.v_max_pu) {
            return bad("band: v_min_pu must be below v_max_pu".into());
        }
        if self.ess.nodes.is_empty() {
            return bad("ess: at least one node is required".into());
        }
        for (i, n) in self.ess.nodes.iter().enumerate() {
            if self.ess.nodes[..i].contains(n) {
                return bad(format!("ess: node {n} listed twice"));
            }
        }
        if !(self.ess.p_max_kw > 0.0 && self.ess.e_rated_kwh > 0.0) {
            return bad("ess: p_max_kw and e_rated_kwh must be positive".into());
        }
        if !(0.0 <= self.ess.soc_min && self.ess.soc_min < self.ess.soc_max && self.ess.soc_max <= 1.0) {
            return bad("ess: need 0 <= soc_min < soc_max <= 1".into());
        }
        if !(self.ess.soc_min..=self.ess.soc_max).contains(&self.ess.soc_init) {
            return bad("ess: soc_init outside [soc_min, soc_max]".into());
        }
        let check_beta = |b: f64, what: &str| {
            if (0.0..=1.0).contains(&b) {
                Ok(())
            } else {
                Err(AppError::Config(format!("coordination: {what} {b} outside [0, 1]")))
            }
        };
        check_beta(self.coordination.beta, "beta")?;
        for &b in &self.coordination.beta_sweep {
            check_beta(b, "beta_sweep value")?;
        }
        if self.profile.path.is_none() && self.profile.days <= self.profile.test_days {
            return bad("profile: days must exceed test_days".into());
        }
        if self.profile.test_days == 0 {
            return bad("profile: test_days must be at least 1".into());
        }
        if !(self.profile.load_scale > 0.0) {
            return bad("profile: load_scale must be positive".into());
        }
        if self.rl.rollout_steps == 0 || self.rl.minibatch == 0 || self.rl.epochs == 0 {
            return bad("rl: rollout_steps, minibatch and epochs must be positive".into());
        }
        if !(self.rl.relax_low_pu >= 0.0 && self.rl.relax_high_pu >= 0.0) {
            return bad("rl: relaxation margins must be non-negative".into());
        }
        if !self.ess.nodes.contains(&self.rl.compare_node) {
            return bad(format!("rl: compare_node {} has no ESS", self.rl.compare_node));
        }
        let nbs = self.neighborhood_indices()?;
        let mut seen = vec![false; self.ess.nodes.len()];
        for nb in &nbs {
            for &i in nb {
                if seen[i] {
                    return bad(format!("coordination: {} is in two neighbourhoods", self.ess.nodes[i]));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("coordination: every ESS must belong to a neighbourhood".into());
        }
        let half_band = 0.5 * (self.band.v_max_pu - self.band.v_min_pu);
        if !(0.0..half_band).contains(&self.coordination.band_margin_pu) {
            return bad("coordination: band_margin_pu must be in [0, half the band width)".into());
        }
        if self.coordination.surrogate_degree == 0 {
            return bad("coordination: surrogate_degree must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn beta_outside_unit_interval_is_rejected() {
        let err = ExperimentConfig::from_toml("[coordination]\nbeta = 1.5\n").unwrap_err();
        assert!(matches!(err, AppError::Config(m) if m.contains("beta")));
        assert!(ExperimentConfig::from_toml("[coordination]\nbeta_sweep = [0.5, -0.1]\n").is_err());
    }

    #[test]
    fn unknown_keys_report_a_line() {
        let err = ExperimentConfig::from_toml("seed = 1\n[ess]\np_max = 60\n").unwrap_err();
        let AppError::Config(m) = err else { panic!() };
        assert!(m.contains("line 3"), "{m}");
    }

    #[test]
    fn neighbourhoods_must_partition() {
        let text = "[coordination]\nneighborhoods = [[\"R9\", \"R14\"], [\"R14\", \"R16\"]]\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
        let text = "[coordination]\nneighborhoods = [[\"R9\"], [\"R14\", \"R16\"]]\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.neighborhood_indices().unwrap(), vec![vec![0], vec![1, 2]]);
    }
}
