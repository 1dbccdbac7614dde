//! TOML run configuration.
//!
//! ```toml
//! [provider]
//! source = "builtin"        # builtin | identity | trace
//! trace = "run.dfdt"        # required when source = "trace"
//! model_seed = 0
//! normalize = true
//!
//! [prompts]
//! path = "prompts.jsonl"    # one {"id", "dataset"?, "tokens"} object per line
//! synthetic = 20            # used when no path is given
//! synthetic_len = 8
//! calibration_path = "calib.jsonl"
//!
//! [decode]
//! max_tokens = 256
//! stop_tokens = []
//! num_samples = 3
//! base_seed = 0
//! retain_layer_kl = false
//!
//! [focus]
//! transform = "exponential" # fixed | linear | sigmoid | exponential
//! sigma = 1.0
//! t0 = 1.0
//! calibrate = false
//! alpha = 0.1
//! layers = "all"            # all | low | high | range:LO-HI
//! kl_mode = "literal-clamped"
//! q_floor = 1e-10
//!
//! [limits]
//! t_min = 0.05
//! t_max = 2.5
//!
//! [sampler]
//! kind = "nucleus"          # temperature-only | top-k | nucleus | typical
//! k = 10
//! p = 0.9
//! tau = 0.9
//!
//! [output]
//! path = "generations.jsonl"
//! ```
//!
//! Every key is optional; unknown keys are rejected. Errors carry the
//! dotted key path.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{KlMode, DEFAULT_Q_FLOOR};
use crate::engine::{synthetic_prompts, DecodeConfig, Prompt, DEFAULT_MAX_TOKENS, DEFAULT_NUM_SAMPLES};
use crate::error::{Error, Result};
use crate::focus::{FocusConfig, TransformKind, DEFAULT_T_MAX, DEFAULT_T_MIN};
use crate::ka::{LayerSet, DEFAULT_ALPHA};
use crate::model::{ModelConfig, TinyTransformer};
use crate::provider::ProviderSource;
use crate::real::Real;
use crate::sampler::{SamplerKind, SamplerSpec, DEFAULT_TAU, DEFAULT_TOP_K, DEFAULT_TOP_P};
use crate::trace::load_trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    #[default]
    Builtin,
    /// Built-in model with every block skipped.
    Identity,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub source: SourceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    pub model_seed: u64,
    pub normalize: bool,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            source: SourceKind::Builtin,
            trace: None,
            model_seed: 0,
            normalize: true,
        }
    }
}

pub const DEFAULT_SYNTHETIC_PROMPTS: usize = 20;
pub const DEFAULT_SYNTHETIC_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synthetic: usize,
    pub synthetic_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_path: Option<PathBuf>,
}

impl Default for PromptsSection {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: DEFAULT_SYNTHETIC_PROMPTS,
            synthetic_len: DEFAULT_SYNTHETIC_LEN,
            calibration_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub max_tokens: usize,
    pub stop_tokens: BTreeSet<u32>,
    pub num_samples: usize,
    pub base_seed: u64,
    pub retain_layer_kl: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_tokens: BTreeSet::new(),
            num_samples: DEFAULT_NUM_SAMPLES,
            base_seed: 0,
            retain_layer_kl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocusSection {
    pub transform: TransformKind,
    pub sigma: f64,
    pub t0: f64,
    /// Solve `t0` from calibration prompts before decoding.
    pub calibrate: bool,
    pub alpha: f64,
    pub layers: LayerSet,
    pub kl_mode: KlMode,
    pub q_floor: f64,
}

impl Default for FocusSection {
    fn default() -> Self {
        Self {
            transform: TransformKind::Exponential,
            sigma: 1.0,
            t0: 1.0,
            calibrate: false,
            alpha: DEFAULT_ALPHA,
            layers: LayerSet::All,
            kl_mode: KlMode::LiteralClamped,
            q_floor: DEFAULT_Q_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub k: usize,
    pub p: f64,
    pub tau: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Nucleus,
            k: DEFAULT_TOP_K,
            p: DEFAULT_TOP_P,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub provider: ProviderSection,
    pub prompts: PromptsSection,
    pub decode: DecodeSection,
    pub focus: FocusSection,
    pub limits: LimitsSection,
    pub sampler: SamplerSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<toml>", e.message().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.inner().message())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fully expanded TOML, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<toml>", e.to_string()))
    }

    pub fn focus_config<F: Real>(&self) -> FocusConfig<F> {
        let f = &self.focus;
        FocusConfig {
            transform: f.transform,
            sigma: F::of(f.sigma),
            t0: F::of(f.t0),
            t_min: F::of(self.limits.t_min),
            t_max: F::of(self.limits.t_max),
            layer_set: f.layers,
            alpha: F::of(f.alpha),
            kl_mode: f.kl_mode,
            q_floor: F::of(f.q_floor),
        }
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        let s = &self.sampler;
        SamplerSpec {
            kind: s.kind,
            k: s.k,
            p: s.p,
            tau: s.tau,
        }
    }

    pub fn decode_config<F: Real>(&self) -> DecodeConfig<F> {
        let d = &self.decode;
        DecodeConfig {
            max_tokens: d.max_tokens,
            stop_tokens: d.stop_tokens.clone(),
            num_samples: d.num_samples,
            base_seed: d.base_seed,
            focus: self.focus_config(),
            sampler: self.sampler_spec(),
            retain_layer_kl: d.retain_layer_kl,
        }
    }

    /// Checks every section. On success returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.provider.source == SourceKind::Trace && self.provider.trace.is_none() {
            return Err(Error::config(
                "provider.trace",
                "required when provider.source = \"trace\"",
            ));
        }
        if self.prompts.path.is_none() && self.prompts.synthetic == 0 {
            return Err(Error::config(
                "prompts.synthetic",
                "must be positive when prompts.path is unset",
            ));
        }
        if self.prompts.path.is_none() && self.prompts.synthetic_len == 0 {
            return Err(Error::config("prompts.synthetic_len", "must be positive"));
        }
        if let Err(e) = self.sampler_spec().validate() {
            let s = &self.sampler;
            let key = match s.kind {
                SamplerKind::TopK => "sampler.k",
                SamplerKind::Nucleus => "sampler.p",
                SamplerKind::Typical => "sampler.tau",
                SamplerKind::TemperatureOnly => "sampler.kind",
            };
            return Err(Error::config(key, e.to_string()));
        }
        self.decode_config::<f64>().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.provider.model_seed,
            normalize_lens: self.provider.normalize,
            identity_blocks: self.provider.source == SourceKind::Identity,
            ..ModelConfig::default()
        }
    }

    pub fn provider_source<F: Real>(&self) -> Result<ProviderSource<F>> {
        match self.provider.source {
            SourceKind::Builtin | SourceKind::Identity => Ok(ProviderSource::Builtin(Arc::new(TinyTransformer::new(
                self.model_config(),
            )?))),
            SourceKind::Trace => {
                let path = self
                    .provider
                    .trace
                    .as_ref()
                    .ok_or_else(|| Error::config("provider.trace", "missing"))?;
                Ok(ProviderSource::Replay(Arc::new(load_trace(path)?)))
            }
        }
    }

    /// Decoding prompts: the prompt file, or synthetic prompts drawn from
    /// `decode.base_seed`.
    pub fn prompts(&self, vocab_size: usize) -> Result<Vec<Prompt>> {
        match &self.prompts.path {
            Some(p) => load_prompts(p),
            None => Ok(synthetic_prompts(
                self.prompts.synthetic,
                self.prompts.synthetic_len,
                vocab_size,
                self.decode.base_seed,
            )),
        }
    }

    /// Calibration prompts, falling back to the decoding prompts.
    pub fn calibration_prompts(&self, vocab_size: usize) -> Result<Vec<Prompt>> {
        match &self.prompts.calibration_path {
            Some(p) => load_prompts(p),
            None => self.prompts(vocab_size),
        }
    }
}

/// Sidecar path holding the resolved config for an output file.
pub fn resolved_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".resolved.toml");
    PathBuf::from(s)
}

/// Reads a JSONL prompt file; blank lines are skipped.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<Prompt>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt =
            serde_json::from_str(&line).map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::input(format!("{}: no prompts", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::from_toml_str(text).and_then(|c| c.validate().map(|_| c)) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.validate().unwrap().is_empty());
        let d = c.decode_config::<f64>();
        assert_eq!(d.focus, FocusConfig::default());
        assert_eq!(d.sampler, SamplerSpec::default());
        assert_eq!(d.max_tokens, 256);
    }

    #[test]
    fn resolved_round_trip() {
        let c =
            RunConfig::from_toml_str("[focus]\nsigma = 2.5\nlayers = \"range:1-2\"\n[decode]\nstop_tokens = [3, 1]\n")
                .unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert!(text.contains("t_max = 2.5"));
    }

    #[test]
    fn error_keys() {
        assert_eq!(key_of("[focus]\nsigma = \"big\"\n"), "focus.sigma");
        assert_eq!(key_of("[focus]\nsigmaa = 1.0\n"), "focus.sigmaa");
        assert_eq!(key_of("[bogus]\nx = 1\n"), "bogus");
        assert_eq!(key_of("[focus]\nsigma = 0.0\n"), "focus.sigma");
        assert_eq!(key_of("[limits]\nt_min = 3.0\n"), "limits.t_min");
        assert_eq!(key_of("[sampler]\nkind = \"top-k\"\nk = 0\n"), "sampler.k");
        assert_eq!(key_of("[provider]\nsource = \"trace\"\n"), "provider.trace");
        assert_eq!(key_of("[focus]\nlayers = \"middle\"\n"), "focus.layers");
        assert_eq!(key_of("[decode\n"), "<toml>");
    }

    #[test]
    fn positive_linear_sigma_warns() {
        let c = RunConfig::from_toml_str("[focus]\ntransform = \"linear\"\nsigma = 0.5\n").unwrap();
        assert_eq!(c.validate().unwrap().len(), 1);
    }

    #[test]
    fn prompt_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"tokens\":[1,2]}\n\n{\"id\":\"b\",\"dataset\":\"x\",\"tokens\":[3]}\n",
        )
        .unwrap();
        let ps = load_prompts(&p).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[1].dataset.as_deref(), Some("x"));
        fs::write(&p, "{\"id\":\"a\",\"tokenz\":[1]}\n").unwrap();
        assert!(matches!(load_prompts(&p), Err(Error::InvalidInput(m)) if m.contains(":1:")));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            resolved_path(Path::new("out/g.jsonl")),
            PathBuf::from("out/g.jsonl.resolved.toml")
        );
    }
}
