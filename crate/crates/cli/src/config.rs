//! Experiment configuration.
//!
//! Configs are strict JSON: unknown keys are rejected. Every optional field
//! has a per-model default; [`ExperimentConfig::resolve`] fills them in, and
//! the resolved document is what gets echoed into a result bundle, so a
//! bundle's `config.json` reruns the same experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{dmatrix, DVector};
use pcmpc_core::benchmarks::{
    friction_model, friction_problem, hicks_model, hicks_problem, hicks_steady_state, lqr_problem, FrictionSetup,
    HicksParams, HicksSetup,
};
use pcmpc_core::closed_loop::{sample_initial_states, ControllerKind, SimulationSpec};
use pcmpc_core::model::{euler_discretize, ContinuousModel, HorizonProblem, PlantModel};
use pcmpc_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Lower clip on the Hicks temperature when sampling initial states.
pub const HICKS_TEMPERATURE_FLOOR: f64 = 0.5;

/// Text stored in every bundle describing how batch initial states are drawn.
pub const GENERATOR_DESCRIPTION: &str = "ChaCha20 (rand_chacha) seeded with seed_from_u64(rng_seed); \
x0 = x_ref * (1 + perturbation * xi), xi ~ N(0, I) drawn component by component; \
Hicks temperature clipped from below at 0.5";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Friction,
    Hicks,
    Lqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerChoice {
    Pcmpc,
    Nmpc,
    Both,
}

impl ControllerChoice {
    pub fn kinds(self) -> Vec<ControllerKind> {
        match self {
            ControllerChoice::Pcmpc => vec![ControllerKind::PcMpc],
            ControllerChoice::Nmpc => vec![ControllerKind::NMpc],
            ControllerChoice::Both => vec![ControllerKind::PcMpc, ControllerKind::NMpc],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerChoice>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub model: ModelKind,
    /// Model constants overriding the defaults (friction: gravity, mass;
    /// hicks: z_cw, z_f, ea, nu, k0, u_1sf, theta).
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    /// Euler substeps of the controller's model per interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    /// Euler substeps of the simulated plant; when absent the plant is the
    /// controller's model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Diagonal of the state weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    /// Input weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    /// Add 1e-8 to the KKT diagonal (exploratory runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_cold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cold_max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub count: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
}

fn default_perturbation() -> f64 {
    0.2
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub emit_eigs: bool,
}

const FRICTION_PARAMS: &[&str] = &["gravity", "mass"];
const HICKS_PARAMS: &[&str] = &["z_cw", "z_f", "ea", "nu", "k0", "u_1sf", "theta"];

fn default_params(model: ModelKind) -> BTreeMap<String, f64> {
    let pairs: Vec<(&str, f64)> = match model {
        ModelKind::Friction => vec![("gravity", 9.81), ("mass", 0.2)],
        ModelKind::Hicks => {
            let p = HicksParams::default();
            vec![
                ("z_cw", p.z_cw),
                ("z_f", p.z_f),
                ("ea", p.ea),
                ("nu", p.nu),
                ("k0", p.k0),
                ("u_1sf", p.u_1sf),
                ("theta", p.theta),
            ]
        }
        ModelKind::Lqr => vec![],
    };
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Paper settings for one model, with nothing overridden.
    pub fn defaults_for(model: ModelKind) -> Self {
        Self {
            problem: ProblemConfig {
                model,
                params: BTreeMap::new(),
                ts: None,
                substeps: None,
                plant_substeps: None,
                horizon: None,
                q: None,
                r: None,
            },
            controller: None,
            solver: SolverSection::default(),
            run: RunSection::default(),
            output: OutputSection::default(),
        }
        .resolve()
        .expect("built-in defaults are valid")
    }

    /// Fill in every default and validate. The result resolves to itself.
    pub fn resolve(&self) -> Result<Self, CliError> {
        let model = self.problem.model;
        let allowed: &[&str] = match model {
            ModelKind::Friction => FRICTION_PARAMS,
            ModelKind::Hicks => HICKS_PARAMS,
            ModelKind::Lqr => &[],
        };
        let mut params = default_params(model);
        for (k, v) in &self.problem.params {
            if !allowed.contains(&k.as_str()) {
                return Err(config_err(format!("unknown parameter `{k}` for model {model:?}")));
            }
            params.insert(k.clone(), *v);
        }

        let (ts, substeps, horizon, q, r) = match model {
            ModelKind::Friction => (0.2, 1, 5, vec![1000.0, 2.0], 1e-3),
            ModelKind::Hicks => (30.0, 30, 10, vec![10.0, 2.0], 1.0),
            ModelKind::Lqr => (0.1, 1, 10, vec![1.0, 1.0], 0.1),
        };
        let (epsilon, n_max) = match model {
            ModelKind::Friction => (1e-4, 50),
            ModelKind::Hicks => (1e-3, 100),
            ModelKind::Lqr => (1e-8, 5),
        };
        let steps = match model {
            ModelKind::Friction => 200,
            ModelKind::Hicks => 40,
            ModelKind::Lqr => 50,
        };

        let problem = ProblemConfig {
            model,
            params,
            ts: Some(self.problem.ts.unwrap_or(ts)),
            substeps: Some(self.problem.substeps.unwrap_or(substeps)),
            plant_substeps: self.problem.plant_substeps,
            horizon: Some(self.problem.horizon.unwrap_or(horizon)),
            q: Some(self.problem.q.clone().unwrap_or(q)),
            r: Some(self.problem.r.unwrap_or(r)),
        };
        let solver = SolverSection {
            epsilon: Some(self.solver.epsilon.unwrap_or(epsilon)),
            n_max: Some(self.solver.n_max.unwrap_or(n_max)),
            jitter: Some(self.solver.jitter.unwrap_or(false)),
            epsilon_cold: Some(self.solver.epsilon_cold.or(self.solver.epsilon).unwrap_or(epsilon)),
            cold_max_iters: Some(self.solver.cold_max_iters.unwrap_or(200)),
        };
        let run = match (&self.run.x0, &self.run.batch) {
            (Some(_), Some(_)) => return Err(config_err("run.x0 and run.batch are mutually exclusive")),
            (Some(x0), None) => RunSection {
                steps: Some(self.run.steps.unwrap_or(steps)),
                x0: Some(x0.clone()),
                batch: None,
            },
            (None, Some(b)) => RunSection {
                steps: Some(self.run.steps.unwrap_or(steps)),
                x0: None,
                batch: Some(b.clone()),
            },
            (None, None) => RunSection {
                steps: Some(self.run.steps.unwrap_or(steps)),
                x0: match model {
                    ModelKind::Friction => Some(vec![0.1, 0.1]),
                    ModelKind::Lqr => Some(vec![1.0, 0.0]),
                    ModelKind::Hicks => None,
                },
                batch: (model == ModelKind::Hicks).then_some(BatchSection {
                    count: 100,
                    rng_seed: 0,
                    perturbation: 0.2,
                }),
            },
        };
        let resolved = Self {
            problem,
            controller: Some(self.controller.unwrap_or(ControllerChoice::Both)),
            solver,
            run,
            output: self.output.clone(),
        };
        resolved.validate()?;
        Ok(resolved)
    }

    fn validate(&self) -> Result<(), CliError> {
        let p = &self.problem;
        let ts = p.ts.unwrap_or(0.0);
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(config_err("problem.ts must be positive"));
        }
        if p.substeps == Some(0) || p.plant_substeps == Some(0) {
            return Err(config_err("substeps must be at least 1"));
        }
        if p.horizon == Some(0) {
            return Err(config_err("problem.horizon must be at least 1"));
        }
        if p.q.as_ref().map(Vec::len) != Some(2) {
            return Err(config_err("problem.q must hold 2 diagonal weights"));
        }
        if self.run.steps == Some(0) {
            return Err(config_err("run.steps must be at least 1"));
        }
        if let Some(x0) = &self.run.x0 {
            if x0.len() != 2 {
                return Err(config_err("run.x0 must hold 2 components"));
            }
        }
        if let Some(b) = &self.run.batch {
            if b.count == 0 {
                return Err(config_err("run.batch.count must be at least 1"));
            }
        }
        self.solver_config().map(|_| ())
    }

    fn resolved_field<T: Copy>(v: Option<T>, name: &str) -> Result<T, CliError> {
        v.ok_or_else(|| config_err(format!("{name} unresolved")))
    }

    pub fn solver_config(&self) -> Result<SolverConfig, CliError> {
        let s = &self.solver;
        let mut cfg = SolverConfig::new(
            Self::resolved_field(s.epsilon, "solver.epsilon")?,
            Self::resolved_field(s.n_max, "solver.n_max")?,
        )?;
        cfg.jitter = s.jitter.unwrap_or(false).then_some(1e-8);
        cfg.cold_start.epsilon_cold = s.epsilon_cold;
        if let Some(it) = s.cold_max_iters {
            cfg.cold_start.max_iters = it;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn continuous_model(&self) -> Result<Option<Arc<dyn ContinuousModel>>, CliError> {
        let p = &self.problem.params;
        let get = |k: &str| {
            p.get(k)
                .copied()
                .ok_or_else(|| config_err(format!("parameter {k} unresolved")))
        };
        Ok(match self.problem.model {
            ModelKind::Friction => Some(Arc::new(friction_model(get("gravity")?, get("mass")?)?)),
            ModelKind::Hicks => Some(Arc::new(hicks_model(self.hicks_params()?))),
            ModelKind::Lqr => None,
        })
    }

    fn hicks_params(&self) -> Result<HicksParams, CliError> {
        let p = &self.problem.params;
        let get = |k: &str| {
            p.get(k)
                .copied()
                .ok_or_else(|| config_err(format!("parameter {k} unresolved")))
        };
        Ok(HicksParams {
            z_cw: get("z_cw")?,
            z_f: get("z_f")?,
            ea: get("ea")?,
            nu: get("nu")?,
            k0: get("k0")?,
            u_1sf: get("u_1sf")?,
            theta: get("theta")?,
        })
    }

    pub fn ts(&self) -> f64 {
        self.problem.ts.unwrap_or(f64::NAN)
    }

    pub fn controller(&self) -> ControllerChoice {
        self.controller.unwrap_or(ControllerChoice::Both)
    }

    pub fn build_problem(&self) -> Result<HorizonProblem, CliError> {
        let p = &self.problem;
        let ts = Self::resolved_field(p.ts, "problem.ts")?;
        let substeps = Self::resolved_field(p.substeps, "problem.substeps")?;
        let horizon = Self::resolved_field(p.horizon, "problem.horizon")?;
        let r = Self::resolved_field(p.r, "problem.r")?;
        let q = p.q.clone().ok_or_else(|| config_err("problem.q unresolved"))?;
        let q = [q[0], q[1]];
        let params = &p.params;
        Ok(match p.model {
            ModelKind::Friction => friction_problem(&FrictionSetup {
                gravity: params["gravity"],
                mass: params["mass"],
                ts,
                substeps,
                horizon,
                q,
                r,
            })?,
            ModelKind::Hicks => hicks_problem(&HicksSetup {
                params: self.hicks_params()?,
                ts,
                substeps,
                horizon,
                q,
                r,
            })?,
            ModelKind::Lqr => {
                // Double integrator.
                let a = dmatrix![1.0, ts; 0.0, 1.0];
                let b = dmatrix![0.5 * ts * ts; ts];
                let qm = nalgebra::DMatrix::from_diagonal(&DVector::from_vec(q.to_vec()));
                lqr_problem(a, b, qm, dmatrix![r], horizon)?
            }
        })
    }

    /// Plant used to advance the simulated world.
    pub fn build_true_plant(&self, problem: &HorizonProblem) -> Result<Arc<dyn PlantModel>, CliError> {
        match (self.problem.plant_substeps, self.continuous_model()?) {
            (Some(k), Some(model)) => Ok(Arc::new(euler_discretize(model, self.ts(), k)?)),
            _ => Ok(problem.plant.clone()),
        }
    }

    /// Plant over half an interval at the plant's resolution, for the
    /// sampling-interval study. Needs an even `plant_substeps`.
    pub fn build_half_plant(&self) -> Result<Option<Arc<dyn PlantModel>>, CliError> {
        match (self.problem.plant_substeps, self.continuous_model()?) {
            (Some(k), Some(model)) if k % 2 == 0 => {
                Ok(Some(Arc::new(euler_discretize(model, self.ts() / 2.0, k / 2)?)))
            }
            _ => Ok(None),
        }
    }

    /// Initial states of the run, in order.
    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        if let Some(x0) = &self.run.x0 {
            return vec![DVector::from_vec(x0.clone())];
        }
        let b = self.run.batch.as_ref().expect("resolved config has x0 or batch");
        let (x_ref, floors): (DVector<f64>, Vec<(usize, f64)>) = match self.problem.model {
            ModelKind::Hicks => (hicks_steady_state().0, vec![(1, HICKS_TEMPERATURE_FLOOR)]),
            ModelKind::Friction => (DVector::from_vec(vec![0.1, 0.1]), vec![]),
            ModelKind::Lqr => (DVector::from_vec(vec![1.0, 0.0]), vec![]),
        };
        sample_initial_states(&x_ref, b.perturbation, b.count, b.rng_seed, &floors)
    }

    pub fn is_batch(&self) -> bool {
        self.run.batch.is_some()
    }

    /// One simulation spec per (initial state, controller), grouped by
    /// controller in the order of [`ControllerChoice::kinds`].
    pub fn specs(&self) -> Result<Vec<(ControllerKind, Vec<SimulationSpec>)>, CliError> {
        let problem = Arc::new(self.build_problem()?);
        let plant = self.build_true_plant(&problem)?;
        let cfg = self.solver_config()?;
        let steps = Self::resolved_field(self.run.steps, "run.steps")?;
        let seed = self.run.batch.as_ref().map_or(0, |b| b.rng_seed);
        let x0s = self.initial_states();
        Ok(self
            .controller()
            .kinds()
            .into_iter()
            .map(|kind| {
                let specs = x0s
                    .iter()
                    .map(|x0| {
                        let mut s = SimulationSpec::new(problem.clone(), x0.clone(), steps, kind, cfg, self.ts());
                        s.true_plant = plant.clone();
                        s.seed = seed;
                        s.record_eigenvalues = self.output.emit_eigs;
                        s
                    })
                    .collect();
                (kind, specs)
            })
            .collect())
    }
}
