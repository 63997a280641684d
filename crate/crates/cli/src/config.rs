//! Layered pipeline configuration: defaults, then `frames.toml`, then
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use frames_core::classifier::{ClassifierConfig, ClassifierProviderKind, ModelParams};
use frames_core::net::RetryPolicy;
use frames_core::translation::{TranslationProviderConfig, TranslationProviderKind};

pub const DEFAULT_CONFIG_FILE: &str = "frames.toml";
pub const DEFAULT_SEED: u64 = 20_230_601;

/// Environment variables read on top of the config file, with the config
/// key each one sets.
pub const ENV_KEYS: &[(&str, &str)] = &[
    ("FRAMES_SEED", "seed"),
    ("FRAMES_CONCURRENCY", "concurrency"),
    ("FRAMES_LLM_ENDPOINT", "classifier.endpoint"),
    ("FRAMES_LLM_MODEL", "classifier.model_id"),
    ("FRAMES_TRANSLATE_ENDPOINT", "translation.endpoint"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub concurrency: usize,
    pub paths: Paths,
    pub translation: TranslationSection,
    pub classifier: ClassifierSection,
    pub prompt: PromptSection,
    pub retry: RetrySection,
    pub batches: BatchSection,
    pub serve: ServeSection,
    pub analysis: AnalysisSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            concurrency: 4,
            paths: Paths::default(),
            translation: TranslationSection::default(),
            classifier: ClassifierSection::default(),
            prompt: PromptSection::default(),
            retry: RetrySection::default(),
            batches: BatchSection::default(),
            serve: ServeSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub translations: PathBuf,
    pub classifications: PathBuf,
    pub annotations: PathBuf,
    pub batches: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            translations: "translations.jsonl".into(),
            classifications: "classifications.jsonl".into(),
            annotations: "annotations.jsonl".into(),
            batches: "batches.jsonl".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationSection {
    pub provider: String,
    pub endpoint: Option<String>,
    pub target_language: String,
    pub timeout_secs: f64,
    pub fixture: Option<PathBuf>,
}

impl Default for TranslationSection {
    fn default() -> Self {
        Self {
            provider: "http_mt".into(),
            endpoint: None,
            target_language: "en".into(),
            timeout_secs: 60.0,
            fixture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub provider: String,
    /// Defaults per provider when unset.
    pub model_id: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_alternatives: usize,
    pub endpoint: Option<String>,
    pub rate_limit: Option<f64>,
    pub timeout_secs: f64,
    pub fixture: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let params = ModelParams::default();
        Self {
            provider: "http_llm".into(),
            model_id: None,
            temperature: params.temperature,
            top_p: params.top_p,
            max_alternatives: params.max_alternatives,
            endpoint: None,
            rate_limit: None,
            timeout_secs: 60.0,
            fixture: None,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub template: Option<PathBuf>,
    pub definitions: Option<PathBuf>,
    /// Overrides the template's frame order.
    pub frame_order: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrySection {
    pub initial_delay_secs: f64,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetrySection {
    fn default() -> Self {
        let p = RetryPolicy::default();
        Self {
            initial_delay_secs: p.initial_delay.as_secs_f64(),
            factor: p.factor,
            max_attempts: p.max_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub per_batch: usize,
    pub n_batches: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self {
            per_batch: frames_core::annotation::DEFAULT_PER_BATCH,
            n_batches: frames_core::annotation::DEFAULT_N_BATCHES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub bin_width: usize,
    pub cap: usize,
    pub renormalize: bool,
    pub format: String,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            bin_width: 100,
            cap: 800,
            renormalize: false,
            format: "csv".into(),
        }
    }
}

/// Dotted-key overrides collected from flags or the environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.0.push((key.to_string(), value.into()));
        self
    }

    pub fn set_opt<V: Into<Value>>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    pub fn set_path(&mut self, key: &str, value: Option<&Path>) -> &mut Self {
        self.set_opt(key, value.map(|p| p.to_string_lossy().into_owned()))
    }

    fn apply(&self, root: &mut Table) {
        for (key, value) in &self.0 {
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("nonempty key");
            let mut table = &mut *root;
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .expect("config sections are tables");
            }
            table.insert(last.to_string(), value.clone());
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an env value as an integer or float when it looks like one.
fn env_value(raw: &str) -> Value {
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::Float(f);
    }
    Value::String(raw.to_string())
}

pub fn env_overrides(lookup: impl Fn(&str) -> Option<String>) -> Overrides {
    let mut o = Overrides::default();
    for (var, key) in ENV_KEYS {
        if let Some(raw) = lookup(var).filter(|v| !v.is_empty()) {
            o.set(key, env_value(&raw));
        }
    }
    o
}

/// Which config file to read: an explicit path must exist; otherwise
/// `frames.toml` in the working directory is used when present.
pub fn locate(explicit: Option<&Path>) -> Result<Option<PathBuf>, String> {
    match explicit {
        Some(p) if p.is_file() => Ok(Some(p.to_path_buf())),
        Some(p) => Err(format!("config file {} not found", p.display())),
        None => {
            let p = PathBuf::from(DEFAULT_CONFIG_FILE);
            Ok(p.is_file().then_some(p))
        }
    }
}

pub fn resolve(
    file: Option<&Path>,
    env: &Overrides,
    flags: &Overrides,
) -> Result<PipelineConfig, String> {
    let mut root = match Value::try_from(PipelineConfig::default()).map_err(|e| e.to_string())? {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    if let Some(path) = file {
        let src = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let table: Table = toml::from_str(&src).map_err(|e| format!("{}: {e}", path.display()))?;
        merge(&mut root, table);
    }
    env.apply(&mut root);
    flags.apply(&mut root);
    Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| format!("invalid configuration: {e}"))
}

impl PipelineConfig {
    pub fn retry(&self) -> Result<RetryPolicy, String> {
        let r = &self.retry;
        if r.initial_delay_secs.is_nan()
            || r.initial_delay_secs < 0.0
            || r.factor.is_nan()
            || r.factor < 1.0
            || r.max_attempts == 0
        {
            return Err(
                "retry: need initial_delay_secs >= 0, factor >= 1, max_attempts >= 1".into(),
            );
        }
        Ok(RetryPolicy {
            initial_delay: Duration::from_secs_f64(r.initial_delay_secs),
            factor: r.factor,
            max_attempts: r.max_attempts,
        })
    }

    pub fn translation_config(
        &self,
        api_key: Option<String>,
    ) -> Result<TranslationProviderConfig, String> {
        let t = &self.translation;
        let kind: TranslationProviderKind = t.provider.parse().map_err(|e| format!("{e}"))?;
        let mut cfg = TranslationProviderConfig::new(kind, t.target_language.clone());
        cfg.timeout = timeout(t.timeout_secs)?;
        cfg.retry = self.retry()?;
        cfg.fixture = t.fixture.clone();
        if kind == TranslationProviderKind::HttpMt {
            cfg.endpoint = t.endpoint.clone();
            cfg.api_key = api_key;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn classifier_config(&self, api_key: Option<String>) -> Result<ClassifierConfig, String> {
        let c = &self.classifier;
        let kind: ClassifierProviderKind = c.provider.parse().map_err(|e| format!("{e}"))?;
        let mut cfg = ClassifierConfig::new(kind);
        cfg.params = ModelParams {
            model_id: c
                .model_id
                .clone()
                .unwrap_or_else(|| default_model_id(kind).to_string()),
            temperature: c.temperature,
            top_p: c.top_p,
            max_alternatives: c.max_alternatives,
        };
        cfg.timeout = timeout(c.timeout_secs)?;
        cfg.retry = self.retry()?;
        cfg.rate_limit = c.rate_limit;
        cfg.fixture = c.fixture.clone();
        cfg.lexicon = c.lexicon.clone();
        if kind == ClassifierProviderKind::HttpLlm {
            cfg.endpoint = c.endpoint.clone();
            cfg.api_key = api_key;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// TOML rendering for `--show-config`, with API key status appended.
    pub fn render(&self, llm_key: bool, translate_key: bool) -> String {
        let mut out = toml::to_string(self).expect("config serializes");
        let status = |set: bool| if set { "set" } else { "unset" };
        out.push_str(&format!(
            "\n# {} is {}\n# {} is {}\n",
            frames_core::classifier::API_KEY_ENV,
            status(llm_key),
            frames_core::translation::API_KEY_ENV,
            status(translate_key),
        ));
        out
    }
}

fn timeout(secs: f64) -> Result<Duration, String> {
    if secs > 0.0 && secs.is_finite() {
        Ok(Duration::from_secs_f64(secs))
    } else {
        Err(format!("timeout must be positive, got {secs}"))
    }
}

pub fn default_model_id(kind: ClassifierProviderKind) -> &'static str {
    match kind {
        ClassifierProviderKind::HttpLlm => "text-davinci-003",
        ClassifierProviderKind::Scripted => "scripted",
        ClassifierProviderKind::Lexicon => "lexicon",
    }
}
