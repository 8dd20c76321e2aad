//! Scenario configuration: a single TOML document whose sections mirror the
//! modules. Every field has a default, so an empty file is the shipped
//! scenario.

use serde::{Deserialize, Serialize};

use crate::dynamics::RobotParams;
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::lhs_control::{ApfConfig, LhsConfig, Reference};
use crate::rhs_control::RhsConfig;
use crate::truth_plant::{DisturbanceSpec, TruthModel};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full stack: outer loop, port integrator, learner and gain synthesis.
    Dac,
    /// The requested port torque is applied directly as the input.
    Baseline,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dac => "dac",
            Mode::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dac" => Ok(Mode::Dac),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub q: Vec<f64>,
    /// Generalized joint momenta. The total momentum of the free-floating
    /// system is zero whatever this holds.
    pub p: Vec<f64>,
    pub r0: [f64; 2],
    pub theta0: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            q: vec![0.5, -0.8],
            p: vec![0.0, 0.0],
            r0: [0.0, 0.0],
            theta0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    /// Plant and inner-loop step (s).
    pub dt: f64,
    pub lhs_hz: f64,
    pub learn_hz: f64,
    pub gain_hz: f64,
    /// A log row is recorded every `log_every` plant steps.
    pub log_every: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            lhs_hz: 100.0,
            learn_hz: 100.0,
            gain_hz: 1.0,
            log_every: 100,
        }
    }
}

/// Phase durations (s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub warmup: f64,
    pub linear: f64,
    pub nonlinear: f64,
    pub disturbed: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            warmup: 120.0,
            linear: 480.0,
            nonlinear: 480.0,
            disturbed: 480.0,
        }
    }
}

impl PhaseConfig {
    pub fn durations(&self) -> [f64; 4] {
        [self.warmup, self.linear, self.nonlinear, self.disturbed]
    }

    pub fn total(&self) -> f64 {
        self.durations().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Row-major nominal matrices.
    pub b_nom: Vec<f64>,
    pub d_nom: Vec<f64>,
    pub disturbance: DisturbanceSpec,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            b_nom: vec![1.0, 0.0, 0.0, 1.0],
            d_nom: vec![0.1, 0.0, 0.0, 0.1],
            disturbance: DisturbanceSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub mode: Mode,
    pub robot: RobotParams,
    pub initial: InitialConfig,
    pub timing: TimingConfig,
    pub phases: PhaseConfig,
    pub lhs: LhsConfig,
    pub reference: Reference,
    pub apf: ApfConfig,
    pub plant: PlantConfig,
    pub rhs: RhsConfig,
    pub learner: LearnerConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            mode: Mode::Dac,
            robot: RobotParams::shipped(),
            initial: InitialConfig::default(),
            timing: TimingConfig::default(),
            phases: PhaseConfig::default(),
            lhs: LhsConfig::default(),
            reference: Reference::default(),
            apf: ApfConfig::default(),
            plant: PlantConfig::default(),
            rhs: RhsConfig::default(),
            learner: LearnerConfig::default(),
        }
    }
}

/// Plant steps between two events of a rate given in Hz.
fn steps_per(rate_hz: f64, dt: f64, key: &str) -> Result<usize> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::config(key, "must be > 0"));
    }
    let ratio = 1.0 / (rate_hz * dt);
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio {
        return Err(Error::config(
            key,
            format!("plant rate {:.6} Hz is not an integer multiple of {rate_hz} Hz", 1.0 / dt),
        ));
    }
    Ok(steps as usize)
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|span| key_path_at(text, span.start))
                .unwrap_or_else(|| "<document>".into());
            Error::config(key, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn dof(&self) -> usize {
        self.robot.dof()
    }

    pub fn lhs_every(&self) -> usize {
        steps_per(self.timing.lhs_hz, self.timing.dt, "timing.lhs_hz").expect("validated")
    }

    pub fn learn_every(&self) -> usize {
        steps_per(self.timing.learn_hz, self.timing.dt, "timing.learn_hz").expect("validated")
    }

    pub fn gain_every(&self) -> usize {
        steps_per(self.timing.gain_hz, self.timing.dt, "timing.gain_hz").expect("validated")
    }

    pub fn truth(&self) -> Result<TruthModel> {
        let n = self.dof();
        TruthModel::new(
            Matrix::from_row_slice(n, n, &self.plant.b_nom),
            Matrix::from_row_slice(n, n, &self.plant.d_nom),
            self.plant.disturbance.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        let n = self.dof();
        if n != 2 {
            return Err(Error::config(
                "robot.bodies",
                "the uncertainty model and scenario are defined for a base plus two links",
            ));
        }
        if self.initial.q.len() != n || self.initial.p.len() != n {
            return Err(Error::config("initial", format!("q and p need {n} entries")));
        }
        if self
            .initial
            .q
            .iter()
            .chain(&self.initial.p)
            .chain(&self.initial.r0)
            .chain(std::iter::once(&self.initial.theta0))
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("initial", "values must be finite"));
        }
        let t = &self.timing;
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            return Err(Error::config("timing.dt", "must be > 0"));
        }
        steps_per(t.lhs_hz, t.dt, "timing.lhs_hz")?;
        steps_per(t.learn_hz, t.dt, "timing.learn_hz")?;
        steps_per(t.gain_hz, t.dt, "timing.gain_hz")?;
        if t.log_every == 0 {
            return Err(Error::config("timing.log_every", "must be >= 1"));
        }
        for (key, d) in ["phases.warmup", "phases.linear", "phases.nonlinear", "phases.disturbed"]
            .iter()
            .zip(self.phases.durations())
        {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::config(*key, "must be >= 0"));
            }
        }
        self.lhs.validate(n)?;
        self.reference.validate()?;
        self.apf.validate(n)?;
        for (key, v) in [("plant.b_nom", &self.plant.b_nom), ("plant.d_nom", &self.plant.d_nom)] {
            if v.len() != n * n || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(key, format!("need {} finite entries", n * n)));
            }
        }
        if self.plant.disturbance.offset.len() != n {
            return Err(Error::config("plant.disturbance.offset", format!("need {n} entries")));
        }
        self.rhs.validate()?;
        self.learner.validate(n)?;
        Ok(())
    }
}

/// Dotted key path (`section.key`) of the TOML entry containing byte `offset`.
fn key_path_at(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_shipped_scenario() {
        let cfg = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.lhs_every(), 10);
        assert_eq!(cfg.learn_every(), 10);
        assert_eq!(cfg.gain_every(), 1000);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = 11;
        cfg.mode = Mode::Baseline;
        cfg.reference = Reference::Follow;
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_names_its_location() {
        let err = ScenarioConfig::from_toml_str("[lhs]\nlambda = 1.0\nlamda = 2.0\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert!(key.starts_with("lhs"), "{key}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn validation_names_the_key() {
        let err = ScenarioConfig::from_toml_str("[timing]\nlhs_hz = 300.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "timing.lhs_hz"));
        let err = ScenarioConfig::from_toml_str("[phases]\nlinear = -1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "phases.linear"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bodies_parse_as_triples() {
        let cfg = ScenarioConfig::from_toml_str(
            "[robot]\nmount_offset = 0.1\nbodies = [[3.0, 0.2, 0.03], [1.0, 0.3, 0.01], [1.0, 0.3, 0.01]]\n",
        )
        .unwrap();
        assert_eq!(cfg.robot.bodies[0].mass, 3.0);
        assert_eq!(cfg.robot.mount_offset, 0.1);
    }
}
