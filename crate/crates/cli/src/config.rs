//! Experiment configuration: one JSON document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use nmtomo::benchmark::BenchmarkTips;
use nmtomo::model::{CumulantState, HamiltonianParams, MecValues};
use nmtomo::reconstruct::{Method, PipelineConfig, RateEstimator, Schedule, SearchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Integral,
    Differential,
    Both,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Integral => vec![Method::Integral],
            MethodChoice::Differential => vec![Method::Differential],
            MethodChoice::Both => vec![Method::Integral, Method::Differential],
        }
    }
}

/// Bath model and ground-truth parameters; each entry of the list is one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Benchmark { tips: Vec<BenchmarkTips> },
    /// Time-independent coefficients `lambda`, `d_qq`, `d_pp`, `d_qp`.
    Custom { mecs: Vec<MecValues> },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Benchmark {
            tips: vec![BenchmarkTips { alpha_sq: 0.01, omega_c_over_omega: 10.0, kt_over_hbar_omega: 10.0 }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seeds: Vec<u64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 0.0, seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// End of the sampled trajectory, in units of `1/omega`.
    pub omega_t_end: f64,
    pub samples: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { omega_t_end: 20.0, samples: 401, rtol: 1e-12, atol: 1e-14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Subdirectory name; defaults to a prefix of the config hash.
    pub run_id: Option<String>,
    /// Pretty-print JSON outputs.
    pub pretty: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), run_id: None, pretty: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hamiltonian: HamiltonianParams,
    pub model: ModelConfig,
    pub method: MethodChoice,
    pub rotating_frame: bool,
    pub schedule: Schedule,
    pub noise: NoiseConfig,
    pub initial: CumulantState,
    pub estimator: RateEstimator,
    pub grid: SearchGrid,
    pub simulation: SimulationConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            hamiltonian: p.hamiltonian,
            model: ModelConfig::default(),
            method: MethodChoice::Integral,
            rotating_frame: false,
            schedule: p.schedule,
            noise: NoiseConfig::default(),
            initial: p.initial,
            estimator: p.estimator,
            grid: p.grid,
            simulation: SimulationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<MethodChoice>,
    pub noise_sigma: Option<f64>,
    pub out: Option<PathBuf>,
    pub rotating_frame: bool,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.noise.seeds = vec![s];
        }
        if let Some(m) = o.method {
            cfg.method = m;
        }
        if let Some(s) = o.noise_sigma {
            cfg.noise.sigma = s;
        }
        if let Some(d) = &o.out {
            cfg.output.dir = d.clone();
        }
        cfg.rotating_frame |= o.rotating_frame;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match &self.model {
            ModelConfig::Benchmark { tips } => {
                if tips.is_empty() {
                    bail!("model.tips is empty");
                }
                for t in tips {
                    t.validate()?;
                }
                if self.hamiltonian.delta() != 0.0 {
                    bail!("the benchmark model requires hamiltonian.delta = 0");
                }
            }
            ModelConfig::Custom { mecs } => {
                if mecs.is_empty() {
                    bail!("model.mecs is empty");
                }
            }
        }
        if self.noise.seeds.is_empty() {
            bail!("noise.seeds is empty");
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            bail!("noise.sigma must be nonnegative");
        }
        let s = &self.simulation;
        if !(s.omega_t_end > 0.0 && s.omega_t_end.is_finite()) || s.samples < 2 {
            bail!("simulation needs omega_t_end > 0 and at least two samples");
        }
        if !(s.rtol > 0.0 && s.atol > 0.0) {
            bail!("simulation tolerances must be positive");
        }
        self.initial.validate(0.0).context("initial state")?;
        if self.initial.t != 0.0 {
            bail!("initial.t must be 0");
        }
        if let ModelConfig::Benchmark { .. } = self.model {
            for tips in self.benchmark_tips() {
                self.pipeline(Method::Integral, tips, 0).validate().context("schedule")?;
            }
        }
        Ok(())
    }

    pub fn benchmark_tips(&self) -> Vec<BenchmarkTips> {
        match &self.model {
            ModelConfig::Benchmark { tips } => tips.clone(),
            ModelConfig::Custom { .. } => Vec::new(),
        }
    }

    pub fn pipeline(&self, method: Method, truth: BenchmarkTips, seed: u64) -> PipelineConfig {
        PipelineConfig {
            hamiltonian: self.hamiltonian,
            truth,
            method,
            rotating_frame: self.rotating_frame,
            schedule: self.schedule,
            noise_sigma: self.noise.sigma,
            seed,
            initial: self.initial,
            component: 0,
            estimator: self.estimator,
            grid: self.grid,
            ode_rtol: self.simulation.rtol,
            ode_atol: self.simulation.atol,
        }
    }

    /// Sample times of simulated trajectories.
    pub fn time_grid(&self) -> Vec<f64> {
        let s = &self.simulation;
        let t_end = s.omega_t_end / self.hamiltonian.omega();
        (0..s.samples).map(|i| t_end * i as f64 / (s.samples - 1) as f64).collect()
    }

    /// Canonical JSON of the effective configuration, without the output location.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }
}
