//! `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::control::{AdapterConfig, ModelConfig};
use crate::denoiser::UNetConfig;
use crate::diffusion::{linear_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_LAMBDA_CA, DEFAULT_LAMBDA_MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Base,
    Control,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Control => "control",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "control" => Ok(Stage::Control),
            _ => Err(Error::Config(format!("unknown stage {s:?}, expected base or control"))),
        }
    }
}

/// What the control stage optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Denoising plus weighted attention and masked-noise terms.
    Total,
    /// Denoising term only; the other two are neither built nor logged.
    LdmOnly,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Total => "total",
            Objective::LdmOnly => "ldm",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(Objective::Total),
            "ldm" => Ok(Objective::LdmOnly),
            _ => Err(Error::Config(format!("unknown objective {s:?}, expected total or ldm"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lambda_ca: f64,
    pub lambda_mask: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Base,
            objective: Objective::Total,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lambda_ca: DEFAULT_LAMBDA_CA,
            lambda_mask: DEFAULT_LAMBDA_MASK,
            seed: 0,
            model: ModelConfig::default(),
            t_steps: DEFAULT_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
        }
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(parse_kv(text)?)
    }

    /// Applies every entry of `map` over the defaults. Unknown keys are
    /// rejected.
    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in &map {
            let v = v.as_str();
            let (u, a) = (&mut c.model.unet, &mut c.model.adapter);
            match k.as_str() {
                "stage" => c.stage = v.parse()?,
                "objective" => c.objective = v.parse()?,
                "steps" => c.steps = parse_value(k, v)?,
                "batch_size" => c.batch_size = parse_value(k, v)?,
                "lr" => c.lr = parse_value(k, v)?,
                "beta1" => c.beta1 = parse_value(k, v)?,
                "beta2" => c.beta2 = parse_value(k, v)?,
                "adam_eps" => c.adam_eps = parse_value(k, v)?,
                "weight_decay" => c.weight_decay = parse_value(k, v)?,
                "lambda_ca" => c.lambda_ca = parse_value(k, v)?,
                "lambda_mask" => c.lambda_mask = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "schedule.t" => c.t_steps = parse_value(k, v)?,
                "schedule.beta_start" => c.beta_start = parse_value(k, v)?,
                "schedule.beta_end" => c.beta_end = parse_value(k, v)?,
                "unet.image_channels" => u.image_channels = parse_value(k, v)?,
                "unet.resolution" => u.resolution = parse_value(k, v)?,
                "unet.base_channels" => u.base_channels = parse_value(k, v)?,
                "unet.token_dim" => u.token_dim = parse_value(k, v)?,
                "unet.time_dim" => u.time_dim = parse_value(k, v)?,
                "unet.temb_dim" => u.temb_dim = parse_value(k, v)?,
                "unet.multipliers" => {
                    let parts: Vec<usize> = v.split(',').map(|p| parse_value(k, p.trim())).collect::<Result<_>>()?;
                    u.multipliers = parts
                        .try_into()
                        .map_err(|_| Error::Config(format!("{k}: expected three values")))?;
                }
                "adapter.p" => a.p = parse_value(k, v)?,
                "adapter.q" => a.q = parse_value(k, v)?,
                "adapter.r" => a.r = parse_value(k, v)?,
                "adapter.n" => a.n = parse_value(k, v)?,
                "adapter.share_slow" => a.share_slow = parse_bool(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Zero steps is accepted and yields the initial weights.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_ca >= 0.0 && self.lambda_mask >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and adam_eps > 0".into()));
        }
        self.model.unet.validate()?;
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.t_steps, self.beta_start, self.beta_end)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let u: &UNetConfig = &self.model.unet;
        let a: &AdapterConfig = &self.model.adapter;
        let m = u.multipliers;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("stage", self.stage.name().into());
        put("objective", self.objective.name().into());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("lambda_ca", self.lambda_ca.to_string());
        put("lambda_mask", self.lambda_mask.to_string());
        put("seed", self.seed.to_string());
        put("schedule.t", self.t_steps.to_string());
        put("schedule.beta_start", self.beta_start.to_string());
        put("schedule.beta_end", self.beta_end.to_string());
        put("unet.image_channels", u.image_channels.to_string());
        put("unet.resolution", u.resolution.to_string());
        put("unet.base_channels", u.base_channels.to_string());
        put("unet.multipliers", format!("{},{},{}", m[0], m[1], m[2]));
        put("unet.token_dim", u.token_dim.to_string());
        put("unet.time_dim", u.time_dim.to_string());
        put("unet.temb_dim", u.temb_dim.to_string());
        put("adapter.p", a.p.to_string());
        put("adapter.q", a.q.to_string());
        put("adapter.r", a.r.to_string());
        put("adapter.n", a.n.to_string());
        put("adapter.share_slow", a.share_slow.to_string());
        s
    }
}
