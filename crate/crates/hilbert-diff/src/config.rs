//! Flat `key = value` run configuration with file parsing, command-line
//! overrides, and a lossless round trip through checkpoint metadata.

use crate::denoiser::NetConfig;
use crate::diffusion::ParamMode;
use crate::error::{Error, Result};
use crate::mollifier::{pixel_variance_to_length_scale, Mollifier};
use crate::schedule::{NoiseSchedule, Sigma2Choice, COSINE_S, MAX_BETA};
use std::path::Path;
use std::str::FromStr;

/// Reverse-process integrator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplerKind {
    /// Deterministic strided updates (default).
    #[default]
    Ddim,
    /// Stochastic full-length reverse chain.
    Ancestral,
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "ancestral" => Ok(SamplerKind::Ancestral),
            other => Err(Error::invalid(format!("unknown sampler '{other}' (expected ddim|ancestral)"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::Ancestral => "ancestral",
        })
    }
}

/// How inpainting obtains the reconstruction-loss gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    /// Backpropagate through the network (default).
    #[default]
    Full,
    /// Treat the network output as constant; cheaper, approximate.
    Frozen,
}

impl FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GuidanceMode::Full),
            "frozen" => Ok(GuidanceMode::Frozen),
            other => Err(Error::invalid(format!("unknown guidance mode '{other}' (expected full|frozen)"))),
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMode::Full => "full",
            GuidanceMode::Frozen => "frozen",
        })
    }
}

/// Every knob of a run. `steps` is the diffusion chain length; the number of
/// optimizer iterations is the separate `train_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Diffusion chain length `T`.
    pub steps: usize,
    /// Optimizer iterations to run.
    pub train_steps: usize,
    pub batch: usize,
    /// Keep one in `rate` grid points per training example.
    pub rate: usize,
    /// Training grid side.
    pub res: usize,
    pub lr: f64,
    /// Smoothing variance in squared pixels at `res`.
    pub pixel_variance: f64,
    /// Toy dataset: `bumps` or `stripes`.
    pub data: String,
    pub channels: usize,
    pub sigma2: Sigma2Choice,
    pub param_mode: ParamMode,
    /// Checkpoint every this many optimizer steps.
    pub ckpt_every: usize,
    pub out: String,
    pub width: usize,
    pub kernel_size: usize,
    pub time_dim: usize,
    pub knn_k: usize,
    /// Inner grid side; 0 means `res / 4`.
    pub inner_res: usize,
    /// Worker threads; 0 picks the machine default.
    pub threads: usize,
    pub sampler: SamplerKind,
    /// Reverse steps taken by the strided sampler.
    pub sample_steps: usize,
    /// Reconstruction guidance strength for inpainting.
    pub lambda: f64,
    pub guidance: GuidanceMode,
    /// Forward-noise level where partial generation starts; 0 disables.
    pub t_start: usize,
    /// Regularizer of the approximate desmoothing filter.
    pub wiener_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            train_steps: 5000,
            batch: 16,
            rate: 4,
            res: 32,
            lr: 1e-3,
            pixel_variance: 1.0,
            data: "bumps".into(),
            channels: 1,
            sigma2: Sigma2Choice::default(),
            param_mode: ParamMode::default(),
            ckpt_every: 1000,
            out: "out".into(),
            width: 64,
            kernel_size: 7,
            time_dim: 128,
            knn_k: 4,
            inner_res: 0,
            threads: 0,
            sampler: SamplerKind::default(),
            sample_steps: 100,
            lambda: 1.0,
            guidance: GuidanceMode::default(),
            t_start: 0,
            wiener_eps: 1e-3,
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{value}' ({e})")))
}

impl TrainConfig {
    /// Set one key; unknown keys are an error listing nothing silently.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "steps" => self.steps = parse_as(key, value)?,
            "train_steps" => self.train_steps = parse_as(key, value)?,
            "batch" => self.batch = parse_as(key, value)?,
            "rate" => self.rate = parse_as(key, value)?,
            "res" => self.res = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "pixel_variance" => self.pixel_variance = parse_as(key, value)?,
            "data" => self.data = value.to_string(),
            "channels" => self.channels = parse_as(key, value)?,
            "sigma2" => {
                self.sigma2 = match value {
                    "beta" => Sigma2Choice::Beta,
                    "beta_tilde" => Sigma2Choice::BetaTilde,
                    other => {
                        return Err(Error::Config(format!(
                            "key 'sigma2': unknown value '{other}' (expected beta|beta_tilde)"
                        )))
                    }
                }
            }
            "param_mode" => self.param_mode = parse_as(key, value)?,
            "ckpt_every" => self.ckpt_every = parse_as(key, value)?,
            "out" => self.out = value.to_string(),
            "width" => self.width = parse_as(key, value)?,
            "kernel_size" => self.kernel_size = parse_as(key, value)?,
            "time_dim" => self.time_dim = parse_as(key, value)?,
            "knn_k" => self.knn_k = parse_as(key, value)?,
            "inner_res" => self.inner_res = parse_as(key, value)?,
            "threads" => self.threads = parse_as(key, value)?,
            "sampler" => self.sampler = parse_as(key, value)?,
            "sample_steps" => self.sample_steps = parse_as(key, value)?,
            "lambda" => self.lambda = parse_as(key, value)?,
            "guidance" => self.guidance = parse_as(key, value)?,
            "t_start" => self.t_start = parse_as(key, value)?,
            "wiener_eps" => self.wiener_eps = parse_as(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parse `key = value` text: `#` comments, blank lines, duplicates keep
    /// the last value and produce a warning.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                warnings.push(format!("duplicate key '{key}' on line {}; keeping the later value", lineno + 1));
            } else {
                seen.push(key.to_string());
            }
            self.apply(key, value)?;
        }
        Ok(warnings)
    }

    /// Defaults, then the file, returning duplicate-key warnings.
    pub fn from_file(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        let warnings = cfg.apply_text(&text)?;
        Ok((cfg, warnings))
    }

    /// Apply command-line `key=value` overrides on top of file values.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// Every key rendered back to text; `apply`ing these reproduces `self`.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let sigma2 = match self.sigma2 {
            Sigma2Choice::Beta => "beta",
            Sigma2Choice::BetaTilde => "beta_tilde",
        };
        vec![
            ("seed".into(), self.seed.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("train_steps".into(), self.train_steps.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("rate".into(), self.rate.to_string()),
            ("res".into(), self.res.to_string()),
            ("lr".into(), format!("{}", self.lr)),
            ("pixel_variance".into(), format!("{}", self.pixel_variance)),
            ("data".into(), self.data.clone()),
            ("channels".into(), self.channels.to_string()),
            ("sigma2".into(), sigma2.into()),
            ("param_mode".into(), self.param_mode.to_string()),
            ("ckpt_every".into(), self.ckpt_every.to_string()),
            ("out".into(), self.out.clone()),
            ("width".into(), self.width.to_string()),
            ("kernel_size".into(), self.kernel_size.to_string()),
            ("time_dim".into(), self.time_dim.to_string()),
            ("knn_k".into(), self.knn_k.to_string()),
            ("inner_res".into(), self.inner_res.to_string()),
            ("threads".into(), self.threads.to_string()),
            ("sampler".into(), self.sampler.to_string()),
            ("sample_steps".into(), self.sample_steps.to_string()),
            ("lambda".into(), format!("{}", self.lambda)),
            ("guidance".into(), self.guidance.to_string()),
            ("t_start".into(), self.t_start.to_string()),
            ("wiener_eps".into(), format!("{}", self.wiener_eps)),
        ]
    }

    /// Rebuild a config from checkpoint metadata.
    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in meta {
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    /// Network shape implied by this config.
    pub fn net_config(&self) -> NetConfig {
        let mut net = NetConfig::new(self.channels, self.res);
        net.width = self.width;
        net.kernel_size = self.kernel_size;
        net.time_dim = self.time_dim;
        net.knn_k = self.knn_k;
        if self.inner_res > 0 {
            net.inner_res = self.inner_res;
        }
        net
    }

    /// Cosine noise schedule of length `steps` with this run's variance choice.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.steps, COSINE_S, MAX_BETA, self.sigma2)
    }

    /// Length scale of the smoothing operator at the training resolution.
    pub fn length_scale(&self) -> f64 {
        pixel_variance_to_length_scale(self.pixel_variance, self.res)
    }

    /// Smoothing operator at the training resolution.
    pub fn mollifier(&self) -> Result<Mollifier> {
        Mollifier::new(self.length_scale())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_text_overrides_defaults_and_ignores_comments() {
        let mut cfg = TrainConfig::default();
        let warnings = cfg
            .apply_text("# run setup\nres = 64  # grid side\n\nlr=0.002\ndata = stripes\nsigma2 = beta\n")
            .unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg.res, 64);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.data, "stripes");
        assert_eq!(cfg.sigma2, Sigma2Choice::Beta);
        assert_eq!(cfg.batch, 16, "untouched keys keep defaults");
    }

    #[test]
    fn chain_length_and_iteration_count_are_distinct_keys() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("steps = 500\ntrain_steps = 9000\n").unwrap();
        assert_eq!(cfg.steps, 500);
        assert_eq!(cfg.train_steps, 9000);
    }

    #[test]
    fn duplicate_keys_warn_and_keep_the_last_value() {
        let mut cfg = TrainConfig::default();
        let warnings = cfg.apply_text("rate = 2\nrate = 8\n").unwrap();
        assert_eq!(cfg.rate, 8);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("duplicate key 'rate'"));
        assert!(warnings[0].contains("line 2"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut cfg = TrainConfig::default();
        match cfg.apply_text("momentum = 0.9\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("unknown key 'momentum'")),
            other => panic!("expected config error, got {other:?}"),
        }
        match cfg.apply("batch", "sixteen") {
            Err(Error::Config(msg)) => assert!(msg.contains("'sixteen'")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(cfg.apply_text("just a line\n").is_err());
    }

    #[test]
    fn command_line_overrides_beat_file_values() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("res = 64\nseed = 7\n").unwrap();
        cfg.apply_overrides([("res", "128"), ("sampler", "ancestral")]).unwrap();
        assert_eq!(cfg.res, 128);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sampler, SamplerKind::Ancestral);
    }

    #[test]
    fn meta_round_trip_reproduces_the_config() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("res = 48\nlr = 0.0003\npixel_variance = 0.7\nparam_mode = x0pred\nlambda = 2.5\n")
            .unwrap();
        let back = TrainConfig::from_meta(&cfg.to_meta()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn derived_objects_follow_the_keys() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("res = 16\nchannels = 2\nwidth = 32\ninner_res = 8\npixel_variance = 0.5\nsteps = 10\n")
            .unwrap();
        let net = cfg.net_config();
        assert_eq!(net.data_channels, 2);
        assert_eq!(net.width, 32);
        assert_eq!(net.inner_res, 8);
        assert_eq!(net.train_res, 16);
        assert_eq!(cfg.length_scale(), 0.5 * 0.5 / (16.0 * 16.0));
        assert_eq!(cfg.schedule().unwrap().steps(), 10);
        // inner_res = 0 falls back to a quarter of the resolution
        let auto = TrainConfig::default().net_config();
        assert_eq!(auto.inner_res, 8);
    }
}
