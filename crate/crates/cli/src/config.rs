//! Run manifests: a TOML file with one table per concern. Command-line flags
//! override whatever the file sets.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::ValueEnum;
use flowct::analysis::Method;
use flowct::velocity::TrainConfig;
use flowct::{PhantomKind, SamplerConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Replaces the phantom, train and sampler seeds when set.
    pub seed: Option<u64>,
    /// Base directory for relative output paths.
    pub out_dir: Option<PathBuf>,
    pub phantom: PhantomSection,
    pub geometry: GeometrySection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub bounds: BoundsSection,
    pub ablate: AblateSection,
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomChoice {
    SheppLogan,
    #[serde(alias = "random-ellipses")]
    Random,
}

impl From<PhantomChoice> for PhantomKind {
    fn from(c: PhantomChoice) -> Self {
        match c {
            PhantomChoice::SheppLogan => PhantomKind::SheppLogan,
            PhantomChoice::Random => PhantomKind::RandomEllipses,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub kind: PhantomChoice,
    pub size: usize,
    pub n_ellipses: usize,
    pub seed: u64,
    pub count: Option<usize>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            kind: PhantomChoice::SheppLogan,
            size: 64,
            n_ellipses: 5,
            seed: 0,
            count: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub views: usize,
    /// Defaults to `ceil(1.5 * image_size)`.
    pub detectors: Option<usize>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            views: 20,
            detectors: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FieldChoice {
    Rotation,
    PointTarget,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub field: FieldChoice,
    pub omega: f64,
    pub global: bool,
    pub max_reuse: usize,
    pub dts: Vec<f64>,
    pub ns: Vec<usize>,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            field: FieldChoice::Rotation,
            omega: 1.0,
            global: false,
            max_reuse: 4,
            dts: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4],
            ns: vec![32, 64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblateAxis {
    ReuseStart,
    MaxReuse,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub axis: Option<AblateAxis>,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub methods: Vec<Method>,
    pub repetitions: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            methods: vec![Method::Fbp, Method::Fmct, Method::Efmct],
            repetitions: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        if let Some(seed) = cfg.seed {
            cfg.phantom.seed = seed;
            cfg.train.seed = seed;
            cfg.sampler.seed = seed;
        }
        Ok(cfg)
    }

    /// Resolves an output path against `out_dir` and creates its parent.
    pub fn output(&self, path: &Path) -> anyhow::Result<PathBuf> {
        let full = match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(parent) = full.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(full)
    }
}
