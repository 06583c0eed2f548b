use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dataset::Split;
use crate::gateway::{load_profiles, ProviderProfile};
use crate::perturb::TaskKind;
use crate::prompt::{FcotStyle, PromptVariant, Technique};
use crate::score::{Normalizer, NO_FINETUNE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub tables: PathBuf,
    pub qa: PathBuf,
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    #[serde(default)]
    pub alias_pool: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub profile: String,
    #[serde(default = "default_tag")]
    pub finetune_tag: String,
}

fn default_tag() -> String {
    NO_FINETUNE.to_string()
}

fn default_variants() -> Vec<PromptVariant> {
    vec![PromptVariant::Original]
}

fn default_max_in_flight() -> usize {
    4
}

fn default_max_tokens() -> u32 {
    crate::gateway::DEFAULT_MAX_TOKENS
}

fn default_ratio() -> f64 {
    1.0
}

fn default_k() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    /// Splits to evaluate; empty means all.
    #[serde(default)]
    pub splits: Vec<Split>,
    pub models: Vec<ModelSpec>,
    pub techniques: Vec<Technique>,
    pub tasks: Vec<TaskKind>,
    #[serde(default = "default_variants")]
    pub variants: Vec<PromptVariant>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub normalizer: Normalizer,
    /// Control items per deleted item in absence detection.
    #[serde(default = "default_ratio")]
    pub absence_control_ratio: f64,
    #[serde(default)]
    pub profiles: Vec<ProviderProfile>,
    #[serde(default)]
    pub profiles_file: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub fcot_style: FcotStyle,
    #[serde(default = "default_k")]
    pub few_shot_k: usize,
    /// Added to the default abstention lexicon.
    #[serde(default)]
    pub abstention_terms: Vec<String>,
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_in_flight: Option<usize>,
    /// Serve every model from this fixture directory.
    pub replay: Option<PathBuf>,
}

pub const REPLAY_PROFILE: &str = "replay";

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, HarnessError> {
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed = if is_json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Reads a TOML or JSON config (by extension), resolves relative paths
    /// against its directory and merges any profiles file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.merge_profiles_file()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.tables);
        resolve(base, &mut self.dataset.qa);
        for p in [
            &mut self.dataset.exemplars,
            &mut self.dataset.alias_pool,
            &mut self.profiles_file,
            &mut self.templates_dir,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.cache_dir);
        resolve(base, &mut self.output_dir);
        for p in &mut self.profiles {
            if let Some(f) = &mut p.fixtures {
                resolve(base, f);
            }
        }
    }

    fn merge_profiles_file(&mut self) -> Result<(), HarnessError> {
        let Some(file) = self.profiles_file.clone() else {
            return Ok(());
        };
        let mut loaded = load_profiles(&file).map_err(|e| HarnessError::Config(e.to_string()))?;
        let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in &mut loaded {
            if let Some(f) = &mut p.fixtures {
                resolve(&base, f);
            }
        }
        for p in loaded {
            if !self.profiles.iter().any(|q| q.name == p.name) {
                self.profiles.push(p);
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.cache_dir {
            self.cache_dir = d.clone();
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.max_in_flight {
            self.max_in_flight = m;
        }
        if let Some(dir) = &o.replay {
            self.profiles.retain(|p| p.name != REPLAY_PROFILE);
            self.profiles.push(ProviderProfile::replay(REPLAY_PROFILE, dir.clone()));
            for m in &mut self.models {
                m.profile = REPLAY_PROFILE.to_string();
            }
        }
    }

    pub fn profile(&self, name: &str) -> Option<&ProviderProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.models.is_empty() {
            return err("no models configured".into());
        }
        if self.techniques.is_empty() {
            return err("no techniques configured".into());
        }
        if self.tasks.is_empty() {
            return err("no tasks configured".into());
        }
        if self.variants.is_empty() {
            return err("no prompt variants configured".into());
        }
        if self.max_in_flight == 0 {
            return err("max_in_flight must be at least 1".into());
        }
        if self.max_tokens == 0 {
            return err("max_tokens must be positive".into());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return err("temperature must be a non-negative number".into());
        }
        if !self.absence_control_ratio.is_finite() || self.absence_control_ratio < 0.0 {
            return err("absence_control_ratio must be non-negative".into());
        }
        let mut names = HashSet::new();
        for p in &self.profiles {
            if !names.insert(&p.name) {
                return err(format!("profile {} defined twice", p.name));
            }
            p.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let mut seen = HashSet::new();
        for m in &self.models {
            if self.profile(&m.profile).is_none() {
                return err(format!("model {} references unknown profile {}", m.model_id, m.profile));
            }
            if !seen.insert((&m.model_id, &m.finetune_tag)) {
                return err(format!("model {} / {} listed twice", m.model_id, m.finetune_tag));
            }
        }
        Ok(())
    }
}
