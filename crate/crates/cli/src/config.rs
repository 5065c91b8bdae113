//! Run configuration: a TOML file merged with command-line flags, flags
//! winning. The fully resolved form is echoed into the output directory
//! and can itself be passed back via `--config` to repeat a run.

use std::path::{Path, PathBuf};

use gridprobe_core::client::{
    Backend, CachedBackend, EchoBackend, LiveBackend, LiveConfig, Offset, PerturbBackend,
    ProviderStyle, ReplayBackend, RetryPolicy, RetryingBackend,
};
use gridprobe_core::metrics::FailurePolicy;
use gridprobe_core::sweep::{LineColor, SweepSpec};
use gridprobe_core::ParserOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    /// Answers every query with the exact ground truth
    MockEcho,
    /// Answers with a deterministically perturbed ground truth
    MockPerturb,
    /// HTTP vision-language endpoint
    Live,
    /// Serves recorded responses from a cache directory, never the network
    Replay,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: DatasetSection,
    pub subset: SubsetSection,
    pub sweep: SweepSection,
    pub backend: BackendSection,
    pub run: RunSection,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<LineColor>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_policy: Option<FailurePolicy>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<BackendChoice>,
    /// Directory for recorded responses. Wraps any live or mock backend in
    /// a write-through cache; required by the replay backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,

    // mock-perturb knobs
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_fraction: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    // live endpoint knobs
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderStyle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_concurrent: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retries: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    /// Best/worst trial panels rendered per configuration (0 disables).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keyed_fallback: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Everything a sweep needs, with defaults applied. `echo` is the same
/// information as a round-trippable config file.
pub struct Resolved {
    pub annotations: PathBuf,
    pub image_root: PathBuf,
    pub subset_size: usize,
    pub subset_seed: u64,
    pub spec: SweepSpec,
    pub parser: ParserOptions,
    pub out: PathBuf,
    pub parallelism: usize,
    pub panels: usize,
    pub backend: BackendSection,
    pub echo: FileConfig,
}

pub fn resolve(file: FileConfig) -> Result<Resolved, CliError> {
    let defaults = SweepSpec::default();
    let annotations = file
        .dataset
        .annotations
        .clone()
        .ok_or_else(|| CliError::Usage("dataset.annotations is required (--annotations)".into()))?;
    let image_root = file
        .dataset
        .images
        .clone()
        .ok_or_else(|| CliError::Usage("dataset.images is required (--images)".into()))?;

    let subset_size = file.subset.size.unwrap_or(500);
    let subset_seed = file.subset.seed.unwrap_or(0);
    let spec = SweepSpec {
        sizes: file.sweep.sizes.clone().unwrap_or(defaults.sizes),
        colors: file.sweep.colors.clone().unwrap_or(defaults.colors),
        alphas: file.sweep.alphas.clone().unwrap_or(defaults.alphas),
        include_baseline: file.sweep.baseline.unwrap_or(defaults.include_baseline),
        line_width: file.sweep.line_width.unwrap_or(defaults.line_width),
        failure_policy: file.sweep.failure_policy.unwrap_or(defaults.failure_policy),
    };
    let parser = ParserOptions {
        keyed_fallback: file.run.keyed_fallback.unwrap_or(false),
    };
    let out = file.run.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let parallelism = file.run.parallelism.unwrap_or(4).max(1);
    let panels = file.run.panels.unwrap_or(0);

    let mut backend = file.backend.clone();
    backend.kind = Some(backend.kind.unwrap_or(BackendChoice::MockEcho));

    let echo = FileConfig {
        dataset: DatasetSection {
            annotations: Some(annotations.clone()),
            images: Some(image_root.clone()),
        },
        subset: SubsetSection {
            size: Some(subset_size),
            seed: Some(subset_seed),
        },
        sweep: SweepSection {
            sizes: Some(spec.sizes.clone()),
            colors: Some(spec.colors.clone()),
            alphas: Some(spec.alphas.clone()),
            baseline: Some(spec.include_baseline),
            line_width: Some(spec.line_width),
            failure_policy: Some(spec.failure_policy),
        },
        backend: backend.clone(),
        run: RunSection {
            out: Some(out.clone()),
            parallelism: Some(parallelism),
            panels: Some(panels),
            keyed_fallback: Some(parser.keyed_fallback),
        },
    };

    Ok(Resolved {
        annotations,
        image_root,
        subset_size,
        subset_seed,
        spec,
        parser,
        out,
        parallelism,
        panels,
        backend,
        echo,
    })
}

pub fn build_backend(section: &BackendSection) -> Result<Box<dyn Backend>, CliError> {
    let kind = section.kind.unwrap_or(BackendChoice::MockEcho);
    let inner: Box<dyn Backend> = match kind {
        BackendChoice::MockEcho => Box::new(EchoBackend),
        BackendChoice::MockPerturb => {
            let raw = section.offset.unwrap_or([0.0; 4]);
            let offset = if section.offset_fraction.unwrap_or(false) {
                Offset::Fraction(raw)
            } else {
                Offset::Pixels(raw)
            };
            Box::new(PerturbBackend {
                offset,
                jitter: section.jitter.unwrap_or(0.0),
                failure_probability: section.failure_probability.unwrap_or(0.0),
                seed: section.seed.unwrap_or(0),
            })
        }
        BackendChoice::Live => {
            let require = |value: &Option<String>, name: &str| {
                value.clone().ok_or_else(|| {
                    CliError::Usage(format!("backend.{name} is required for the live backend"))
                })
            };
            let config = LiveConfig {
                endpoint: require(&section.endpoint, "endpoint")?,
                model: require(&section.model, "model")?,
                provider: section.provider.unwrap_or(ProviderStyle::OpenaiChat),
                api_key_env: section
                    .api_key_env
                    .clone()
                    .unwrap_or_else(|| "GRIDPROBE_API_KEY".into()),
                max_tokens: section.max_tokens.unwrap_or(1024),
                timeout_secs: section.timeout_secs.unwrap_or(120),
            };
            let live = LiveBackend::new(config)
                .map_err(|e| CliError::Infrastructure(e.to_string()))?;
            let policy = RetryPolicy {
                max_concurrent: section.max_concurrent.unwrap_or(4),
                retries: section.retries.unwrap_or(3),
                ..RetryPolicy::default()
            };
            Box::new(
                RetryingBackend::new(live, policy)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            )
        }
        BackendChoice::Replay => {
            let dir = section.cache.as_ref().ok_or_else(|| {
                CliError::Usage("the replay backend requires backend.cache (--cache)".into())
            })?;
            // replay never touches the network; no write-through wrap
            return Ok(Box::new(
                ReplayBackend::open(dir).map_err(|e| CliError::Infrastructure(e.to_string()))?,
            ));
        }
    };

    match &section.cache {
        Some(dir) => Ok(Box::new(
            CachedBackend::new(inner, dir)
                .map_err(|e| CliError::Infrastructure(e.to_string()))?,
        )),
        None => Ok(inner),
    }
}
