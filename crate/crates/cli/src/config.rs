use std::fmt;
use std::path::{Path, PathBuf};

use riskmpc::{PlannerOptions, PolicyMode, ProblemConfig};
use serde::{Deserialize, Serialize};

/// One MPC policy to plan with and simulate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub mode: PolicyMode,
    /// Ignored (and recorded as 0) for the neutral mode.
    #[serde(default)]
    pub gamma: f64,
}

impl PolicySpec {
    /// Column and file label, e.g. `neutral`, `averse_2`, `seeking_-0.5`.
    pub fn label(&self) -> String {
        match self.mode {
            PolicyMode::Neutral => "neutral".into(),
            mode => format!("{mode}_{}", self.gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default = "defaults::policies")]
    pub policies: Vec<PolicySpec>,
    /// Risk parameters under which closed-loop costs are scored.
    #[serde(default = "defaults::eval_gammas")]
    pub eval_gammas: Vec<f64>,
    /// Open-loop bounds to report; defaults to the nonzero policy gammas.
    #[serde(default)]
    pub bound_gammas: Option<Vec<f64>>,
    #[serde(default = "defaults::n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub planner: PlannerOptions,
}

mod defaults {
    use super::*;

    pub fn policies() -> Vec<PolicySpec> {
        vec![PolicySpec {
            mode: PolicyMode::Neutral,
            gamma: 0.0,
        }]
    }
    pub fn eval_gammas() -> Vec<f64> {
        vec![0.0]
    }
    pub fn n_paths() -> usize {
        2000
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    /// Replaces the CCP tolerance `planner.ccp.eps`.
    pub tol: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            let mut path = e.path().to_string();
            if path == "problem" {
                if let Some(sub) = problem_error_path(text) {
                    path = format!("problem.{sub}");
                }
            }
            let at = if path == "." {
                String::new()
            } else {
                format!(" at `{path}`")
            };
            ConfigError(format!(
                "{origin}:{}:{}{at}: {inner}",
                inner.line(),
                inner.column()
            ))
        })?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        for p in &mut self.policies {
            if p.mode == PolicyMode::Neutral {
                p.gamma = 0.0;
            }
        }
        if self.bound_gammas.is_none() {
            let mut gs: Vec<f64> = Vec::new();
            for p in &self.policies {
                if p.gamma != 0.0 && !gs.contains(&p.gamma) {
                    gs.push(p.gamma);
                }
            }
            self.bound_gammas = Some(gs);
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.n_paths {
            self.n_paths = n;
        }
        if let Some(t) = o.tol {
            self.planner.ccp.eps = t;
        }
        self.validate()
    }

    pub fn bound_gammas(&self) -> &[f64] {
        self.bound_gammas.as_deref().unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.policies.is_empty() {
            return err("policies: at least one policy is required".into());
        }
        let mut labels = Vec::new();
        for (i, p) in self.policies.iter().enumerate() {
            let ok = match p.mode {
                PolicyMode::Neutral => true,
                PolicyMode::Averse => p.gamma.is_finite() && p.gamma > 0.0,
                PolicyMode::Seeking => p.gamma.is_finite() && p.gamma < 0.0,
            };
            if !ok {
                return err(format!(
                    "policies[{i}]: gamma {} is invalid for mode {}",
                    p.gamma, p.mode
                ));
            }
            let label = p.label();
            if labels.contains(&label) {
                return err(format!("policies[{i}]: duplicate policy {label}"));
            }
            labels.push(label);
        }
        if self.eval_gammas.is_empty() {
            return err("eval_gammas: at least one value is required".into());
        }
        if let Some(i) = self.eval_gammas.iter().position(|g| !g.is_finite()) {
            return err(format!("eval_gammas[{i}]: must be finite"));
        }
        if let Some(i) = self.bound_gammas().iter().position(|g| !g.is_finite() || *g == 0.0) {
            return err(format!("bound_gammas[{i}]: must be finite and nonzero"));
        }
        if self.n_paths == 0 {
            return err("n_paths: must be at least 1".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return err("output_dir: must not be empty".into());
        }
        let c = &self.planner.ccp;
        if !(c.eps > 0.0) || c.stall_window == 0 || !(c.breakdown_cap > 0.0) || c.max_iter == 0 {
            return err(format!("planner.ccp: invalid options {c:?}"));
        }
        let s = &self.planner.solver;
        if !(s.tol > 0.0) || s.max_iter == 0 {
            return err(format!("planner.solver: invalid options {s:?}"));
        }
        Ok(())
    }
}

/// Field path of a schema error inside the tagged `problem` object, which
/// serde reports only as `problem`.
fn problem_error_path(text: &str) -> Option<String> {
    let root: serde_json::Value = serde_json::from_str(text).ok()?;
    let mut obj = root.get("problem")?.as_object()?.clone();
    let builder = obj.remove("builder")?;
    let body = serde_json::Value::Object(obj);
    let path = match builder.as_str()? {
        "battery" => serde_path_to_error::deserialize::<_, riskmpc::BatteryParams>(body).err()?.path().to_string(),
        "lqr" => serde_path_to_error::deserialize::<_, riskmpc::problem::LqrParams>(body).err()?.path().to_string(),
        "inline" => serde_path_to_error::deserialize::<_, riskmpc::problem::InlineProblem>(body).err()?.path().to_string(),
        _ => return None,
    };
    (path != ".").then_some(path)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"problem": {"builder": "battery", "baseline": {"hourly": [
        0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]}}}"#;

    #[test]
    fn defaults_are_filled() {
        let cfg = ExperimentConfig::from_json(MINIMAL, "mem").unwrap();
        assert_eq!(cfg.n_paths, 2000);
        assert_eq!(cfg.eval_gammas, vec![0.0]);
        assert_eq!(cfg.bound_gammas(), &[] as &[f64]);
        match &cfg.problem {
            ProblemConfig::Battery(b) => {
                assert_eq!(b.sigma, 0.2);
                assert_eq!(b.horizon, 300);
            }
            other => panic!("unexpected {other:?}"),
        }
        let echoed = serde_json::to_value(&cfg).unwrap();
        assert_eq!(echoed["problem"]["sigma"], 0.2);
    }

    #[test]
    fn syntax_error_reports_position() {
        let e = ExperimentConfig::from_json("{\n  \"problem\": ,\n}", "bad.json").unwrap_err();
        assert!(e.0.starts_with("bad.json:2:"), "{e}");
    }

    #[test]
    fn schema_error_reports_field_path() {
        let text = MINIMAL.replace("\"baseline\"", "\"sigma\": \"x\", \"baseline\"");
        let e = ExperimentConfig::from_json(&text, "c.json").unwrap_err();
        assert!(e.0.contains("problem.sigma"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"problem": {"builder": "nope"}}"#, "c").unwrap_err();
        assert!(e.0.contains("problem"), "{e}");
    }

    #[test]
    fn policy_gamma_sign_is_checked() {
        let text = MINIMAL.replacen('{', r#"{"policies": [{"mode": "averse", "gamma": -1}], "#, 1);
        assert!(ExperimentConfig::from_json(&text, "c").is_err());
        let text = MINIMAL.replacen('{', r#"{"policies": [{"mode": "seeking", "gamma": -1}], "#, 1);
        let cfg = ExperimentConfig::from_json(&text, "c").unwrap();
        assert_eq!(cfg.bound_gammas(), &[-1.0]);
        assert_eq!(cfg.policies[0].label(), "seeking_-1");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL, "c").unwrap();
        let o = Overrides {
            output_dir: Some("elsewhere".into()),
            seed: Some(9),
            n_paths: Some(3),
            tol: Some(1e-9),
        };
        cfg.apply(&o).unwrap();
        assert_eq!((cfg.seed, cfg.n_paths, cfg.planner.ccp.eps), (9, 3, 1e-9));
        let bad = Overrides {
            n_paths: Some(0),
            ..Default::default()
        };
        assert!(cfg.apply(&bad).is_err());
    }
}
