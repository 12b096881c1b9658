//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 0
//! d = 10
//! K = 10            # n defaults to 3·d
//! method = ["admm", "avg", "alldata"]
//! runs = 10
//! sem = "linear"
//!
//! [graph]
//! edge_count = 10
//!
//! [hyperparameters]
//! lambda = 0.01
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use fedbnsl::consensus::AdmmConfig;
use fedbnsl::federation::Transport;
use fedbnsl::numerics::SolverOptions;
use fedbnsl::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Admm,
    AdmmMlp,
    Voting,
    Avg,
    Best,
    Alldata,
    Suffstats,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Admm,
        Method::AdmmMlp,
        Method::Voting,
        Method::Avg,
        Method::Best,
        Method::Alldata,
        Method::Suffstats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Admm => "admm",
            Method::AdmmMlp => "admm-mlp",
            Method::Voting => "voting",
            Method::Avg => "avg",
            Method::Best => "best",
            Method::Alldata => "alldata",
            Method::Suffstats => "suffstats",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Fit each client independently, then aggregate.
    pub fn uses_local_fits(self) -> bool {
        matches!(self, Method::Voting | Method::Avg | Method::Best)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    #[default]
    Er,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default)]
    pub kind: GraphKind,
    /// Defaults to `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

/// Overrides applied on top of the family defaults
/// ([`AdmmConfig::linear`] or [`AdmmConfig::nonlinear`]).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_solver: Option<SolverOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_solver: Option<SolverOptions>,
}

impl Hyperparameters {
    pub fn apply(&self, mut base: AdmmConfig) -> AdmmConfig {
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = self.$f { base.$f = v; })*
            };
        }
        set!(
            rho1_init,
            rho2_init,
            lambda,
            gamma1,
            gamma2,
            max_rounds,
            rho_max,
            h_tolerance,
            threshold_tau,
            hidden_units,
            global_solver,
            local_solver
        );
        if self.consensus_tolerance.is_some() {
            base.consensus_tolerance = self.consensus_tolerance;
        }
        base
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<Method>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Method),
        Many(Vec<Method>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(m) => vec![m],
        OneOrMany::Many(v) => v,
    })
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub d: usize,
    /// Total samples; defaults to `3·d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "K", alias = "k")]
    pub clients: usize,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub sem: SemKind,
    #[serde(deserialize_with = "one_or_many")]
    pub method: Vec<Method>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub transport: TransportKind,
    /// Bind address for `transport = "tcp"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
    /// Whether methods may consult the ground truth. Only `best` does.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub truth: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sample_count(&self) -> usize {
        self.n.unwrap_or(3 * self.d)
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count.unwrap_or(self.d)
    }

    /// Estimator family used by `method`: MLP for `admm-mlp`, linear for
    /// `admm` and `suffstats`, the SEM kind for the baselines.
    pub fn family_of(&self, method: Method) -> SemKind {
        match method {
            Method::Admm | Method::Suffstats => SemKind::Linear,
            Method::AdmmMlp => SemKind::Mlp,
            _ => self.sem,
        }
    }

    pub fn admm_config(&self, family: SemKind) -> AdmmConfig {
        let base = match family {
            SemKind::Linear => AdmmConfig::linear(),
            SemKind::Mlp => AdmmConfig::nonlinear(),
        };
        self.hyperparameters.apply(base)
    }

    pub fn transport(&self) -> Transport {
        match self.transport {
            TransportKind::Inproc => Transport::Inproc,
            TransportKind::Tcp => Transport::Tcp {
                bind: self.bind.clone().unwrap_or_else(|| "127.0.0.1:0".into()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d < 2 {
            return bad(format!("d must be at least 2, got {}", self.d));
        }
        if self.clients == 0 {
            return bad("K must be at least 1".into());
        }
        let n = self.sample_count();
        if n < self.clients {
            return bad(format!(
                "n = {n} leaves some of the K = {} clients empty",
                self.clients
            ));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        let max_edges = self.d * (self.d - 1) / 2;
        if self.edge_count() > max_edges {
            return bad(format!(
                "edge_count {} exceeds d(d-1)/2 = {max_edges}",
                self.edge_count()
            ));
        }
        if self.method.is_empty() {
            return bad("at least one method is required".into());
        }
        let distinct: BTreeSet<_> = self.method.iter().collect();
        if distinct.len() != self.method.len() {
            return bad("methods must not repeat".into());
        }
        if self.method.contains(&Method::Best) && !self.truth {
            return bad("method \"best\" needs the ground truth, which is withheld".into());
        }
        if self.transport == TransportKind::Inproc && self.bind.is_some() {
            return bad("bind is only meaningful with transport = \"tcp\"".into());
        }
        for &m in &self.method {
            self.admm_config(self.family_of(m))
                .validate()
                .map_err(|e| Error::Config(format!("hyperparameters for {m}: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg =
            ExperimentConfig::from_toml("seed = 1\nd = 10\nK = 10\nmethod = \"admm\"").unwrap();
        assert_eq!(cfg.sample_count(), 30);
        assert_eq!(cfg.edge_count(), 10);
        assert_eq!(cfg.runs, 1);
        assert_eq!(cfg.method, vec![Method::Admm]);
        assert_eq!(cfg.admm_config(SemKind::Linear), AdmmConfig::linear());
    }

    #[test]
    fn overrides_apply_to_family_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 0\nd = 5\nK = 2\nsem = \"mlp\"\nmethod = [\"admm-mlp\", \"voting\"]\n\
             [hyperparameters]\nlambda = 0.5\nmax_rounds = 7\n",
        )
        .unwrap();
        let c = cfg.admm_config(cfg.family_of(Method::Voting));
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.max_rounds, 7);
        assert_eq!(c.rho1_init, AdmmConfig::nonlinear().rho1_init);
        assert_eq!(cfg.family_of(Method::Admm), SemKind::Linear);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = "seed = 0\nd = 5\nK = 2\nmethod = \"admm\"\n";
        assert!(ExperimentConfig::from_toml(&format!("{base}colour = 1\n")).is_err());
        assert!(
            ExperimentConfig::from_toml(&format!("{base}[hyperparameters]\nlamda = 1\n")).is_err()
        );
        assert!(ExperimentConfig::from_toml(&format!("{base}runs = 0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{base}n = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{base}[graph]\nedge_count = 11\n")).is_err());
        assert!(ExperimentConfig::from_toml("seed = 0\nd = 5\nK = 2\nmethod = \"pc\"\n").is_err());
        assert!(
            ExperimentConfig::from_toml(&format!("{base}[hyperparameters]\nlambda = -1\n"))
                .is_err()
        );
    }

    #[test]
    fn best_requires_truth() {
        let text = "seed = 0\nd = 5\nK = 2\nmethod = [\"voting\", \"best\"]\ntruth = false\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ExperimentConfig::from_toml(&text.replace("false", "true")).is_ok());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\nd = 6\nn = 40\nK = 4\nmethod = [\"avg\", \"best\"]\nruns = 2\n\
             transport = \"tcp\"\nbind = \"127.0.0.1:0\"\n[graph]\nedge_count = 4\n\
             [hyperparameters]\nh_tolerance = 1e-6\n\
             [hyperparameters.global_solver]\nmax_iterations = 50\ngradient_tolerance = 1e-5\nhistory_size = 5\n",
        )
        .unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
