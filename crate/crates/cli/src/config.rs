//! Flat `key = value` run configuration.
//!
//! ```text
//! # model
//! n = 1000
//! lambda0 = 0.1
//! mu0 = 0.1
//! mu1 = 0.2
//! lambda2 = 0.375
//! infection = mass_action      # mass_action | frequency_dependent | linear
//! lambda1 = 2.0
//! tracing = A                  # A | B | C
//! lambda3 = 0.5
//! psi = exp:1.0                # indicator:W | exp:C | gamma:K:THETA | const:L
//! time_unit = days
//! # run
//! s0 = 1000                    # initial counts
//! i0 = 100
//! horizon = 5.0
//! seed = 42
//! stop_on_extinction = false
//! max_events = 100000          # optional
//! grid_step = 0.05             # optional; trajectory and ensemble grids
//! h = 0.001                    # limit solver step
//! replicas = 200
//! caps = 15,10,10              # optional; oracle truncation
//! epsilon = 1e-6
//! out_dir = results            # optional
//! ```
//!
//! Every key has a default except the ones that define nothing sensible
//! by themselves; unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use ctsir::{Config, Error, InfectionRate, ModelSpec, Result, SimulationConfig, StopRule, TracingModel, Weight};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec<f64>,
    pub s0: u64,
    pub i0: u64,
    pub horizon: f64,
    pub seed: u64,
    pub stop_on_extinction: bool,
    pub max_events: Option<u64>,
    pub grid_step: Option<f64>,
    pub h: f64,
    pub replicas: u64,
    pub caps: Option<(u64, u64, u64)>,
    pub epsilon: f64,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: ModelSpec { n: 1, ..ModelSpec::zero() },
            s0: 0,
            i0: 0,
            horizon: 1.0,
            seed: 0,
            stop_on_extinction: false,
            max_events: None,
            grid_step: None,
            h: 1e-3,
            replicas: 100,
            caps: None,
            epsilon: 1e-6,
            out_dir: None,
        }
    }
}

pub fn parse_psi(text: &str) -> Result<Weight> {
    let mut parts = text.trim().split(':');
    let kind = parts.next().unwrap_or("");
    let nums: Vec<f64> = parts
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Usage(format!("bad number {p:?} in weight {text:?}"))))
        .collect::<Result<_>>()?;
    let psi = match (kind, nums.as_slice()) {
        ("indicator", [w]) => Weight::indicator(*w),
        ("exp", [c]) => Weight::exponential(*c),
        ("gamma", [k, theta]) => Weight::gamma(*k, *theta),
        ("const", [l]) => Weight::constant(*l),
        _ => return Err(Error::Usage(format!("weight {text:?}: expected indicator:W, exp:C, gamma:K:THETA or const:L"))),
    };
    psi.validate()?;
    Ok(psi)
}

pub fn format_psi(psi: &Weight) -> String {
    match *psi {
        Weight::Indicator { window } => format!("indicator:{window:?}"),
        Weight::Exponential { rate } => format!("exp:{rate:?}"),
        Weight::GammaDensity { shape, scale } => format!("gamma:{shape:?}:{scale:?}"),
        Weight::Constant { level } => format!("const:{level:?}"),
    }
}

pub fn parse_model(text: &str) -> Result<TracingModel> {
    match text.trim() {
        "A" | "a" => Ok(TracingModel::A),
        "B" | "b" => Ok(TracingModel::B),
        "C" | "c" => Ok(TracingModel::C),
        other => Err(Error::Usage(format!("tracing model {other:?}: expected A, B or C"))),
    }
}

fn model_name(m: TracingModel) -> &'static str {
    match m {
        TracingModel::A => "A",
        TracingModel::B => "B",
        TracingModel::C => "C",
    }
}

pub fn parse_caps(text: &str) -> Result<(u64, u64, u64)> {
    let v: Vec<u64> = text
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| Error::Usage(format!("caps {text:?}: expected S,I,R"))))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        [s, i, r] => Ok((*s, *i, *r)),
        _ => Err(Error::Usage(format!("caps {text:?}: expected three values"))),
    }
}

fn num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse { line, message: format!("{key}: cannot parse {value:?}") })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut infection = "mass_action".to_string();
        let mut lambda1 = 0.0;
        let mut tracing = TracingModel::A;
        let mut lambda3 = 0.0;
        let mut seen = std::collections::HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or(Error::Parse { line, message: format!("expected key = value, got {content:?}") })?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse { line, message: format!("duplicate key {key}") });
            }
            let usage = |e: Error| match e {
                Error::Usage(m) => Error::Parse { line, message: m },
                other => other,
            };
            match key {
                "n" => cfg.spec.n = num(key, value, line)?,
                "lambda0" => cfg.spec.lambda0 = num(key, value, line)?,
                "mu0" => cfg.spec.mu0 = num(key, value, line)?,
                "mu1" => cfg.spec.mu1 = num(key, value, line)?,
                "lambda2" => cfg.spec.lambda2 = num(key, value, line)?,
                "infection" => infection = value.to_string(),
                "lambda1" => lambda1 = num(key, value, line)?,
                "tracing" => tracing = parse_model(value).map_err(usage)?,
                "lambda3" => lambda3 = num(key, value, line)?,
                "psi" => cfg.spec.psi = parse_psi(value).map_err(usage)?,
                "time_unit" => cfg.spec.time_unit = value.to_string(),
                "s0" => cfg.s0 = num(key, value, line)?,
                "i0" => cfg.i0 = num(key, value, line)?,
                "horizon" => cfg.horizon = num(key, value, line)?,
                "seed" => cfg.seed = num(key, value, line)?,
                "stop_on_extinction" => cfg.stop_on_extinction = num(key, value, line)?,
                "max_events" => cfg.max_events = Some(num(key, value, line)?),
                "grid_step" => cfg.grid_step = Some(num(key, value, line)?),
                "h" => cfg.h = num(key, value, line)?,
                "replicas" => cfg.replicas = num(key, value, line)?,
                "caps" => cfg.caps = Some(parse_caps(value).map_err(usage)?),
                "epsilon" => cfg.epsilon = num(key, value, line)?,
                "out_dir" => cfg.out_dir = Some(value.to_string()),
                other => return Err(Error::Parse { line, message: format!("unknown key {other:?}") }),
            }
        }
        cfg.spec.infection = match infection.as_str() {
            "mass_action" => InfectionRate::MassAction(lambda1),
            "frequency_dependent" => InfectionRate::FrequencyDependent(lambda1),
            "linear" => InfectionRate::Linear(lambda1),
            other => return Err(Error::Usage(format!("infection {other:?}: expected mass_action, frequency_dependent or linear"))),
        };
        cfg.spec.tracing = tracing.with_coefficient(lambda3);
        cfg.simulation().validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` returns an equal value.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let (infection, lambda1) = match s.infection {
            InfectionRate::MassAction(c) => ("mass_action", c),
            InfectionRate::FrequencyDependent(c) => ("frequency_dependent", c),
            InfectionRate::Linear(c) => ("linear", c),
        };
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("n", s.n.to_string());
        put("lambda0", format!("{:?}", s.lambda0));
        put("mu0", format!("{:?}", s.mu0));
        put("mu1", format!("{:?}", s.mu1));
        put("lambda2", format!("{:?}", s.lambda2));
        put("infection", infection.into());
        put("lambda1", format!("{lambda1:?}"));
        put("tracing", model_name(s.tracing.model()).into());
        put("lambda3", format!("{:?}", s.tracing.coefficient()));
        put("psi", format_psi(&s.psi));
        put("time_unit", s.time_unit.clone());
        put("s0", self.s0.to_string());
        put("i0", self.i0.to_string());
        put("horizon", format!("{:?}", self.horizon));
        put("seed", self.seed.to_string());
        put("stop_on_extinction", self.stop_on_extinction.to_string());
        if let Some(m) = self.max_events {
            put("max_events", m.to_string());
        }
        if let Some(g) = self.grid_step {
            put("grid_step", format!("{g:?}"));
        }
        put("h", format!("{:?}", self.h));
        put("replicas", self.replicas.to_string());
        if let Some((a, b, c)) = self.caps {
            put("caps", format!("{a},{b},{c}"));
        }
        put("epsilon", format!("{:?}", self.epsilon));
        if let Some(d) = &self.out_dir {
            put("out_dir", d.clone());
        }
        out
    }

    pub fn simulation(&self) -> Config {
        let mut c = SimulationConfig::new(self.spec.clone(), self.s0, self.i0, self.horizon).with_seed(self.seed);
        c.stop = StopRule { on_extinction: self.stop_on_extinction, max_events: self.max_events };
        c
    }

    /// Grid step for sampled outputs: the configured one, or horizon/500.
    pub fn grid_step(&self) -> f64 {
        self.grid_step.unwrap_or(self.horizon / 500.0)
    }

    /// Initial densities `(s0/n, i0/n)`.
    pub fn densities(&self) -> (f64, f64) {
        let n = self.spec.n as f64;
        (self.s0 as f64 / n, self.i0 as f64 / n)
    }
}
