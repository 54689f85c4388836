use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DomainDataset, FilterSpec, SyntheticTask, TaskKind};
use crate::error::{Error, Result};
use crate::mask::PruneSpec;
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::train::{ExtensionMode, TrainConfig};

/// Model shape: a named preset or explicit fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    Preset { preset: String },
    Explicit(ModelConfig),
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSection::Preset { preset } => match preset.as_str() {
                "mini" => ModelConfig::mini(),
                "desk" => ModelConfig::desk(),
                "full" => ModelConfig::full(),
                other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
            },
            ModelSection::Explicit(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A training config given inline or as a path to its own TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageConfig {
    Path(PathBuf),
    Inline(TrainConfig),
}

impl StageConfig {
    pub fn resolve(&self, root: &Path) -> Result<TrainConfig> {
        let cfg = self.load(root)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self, root: &Path) -> Result<TrainConfig> {
        Ok(match self {
            StageConfig::Inline(c) => c.clone(),
            StageConfig::Path(p) => {
                let p = root.join(p);
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                toml::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: StageConfig,
    /// Per-domain and all-domain baselines.
    pub finetune: StageConfig,
    /// The fine-tune before pruning; defaults to `finetune` when absent. Its
    /// budget is always `prune.ft_epochs`.
    #[serde(default)]
    pub mask: Option<StageConfig>,
    pub doss: StageConfig,
    /// Extension training; defaults to `finetune` when absent.
    #[serde(default)]
    pub extend: Option<StageConfig>,
}

/// Where a domain's sentence pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSource {
    Synthetic {
        task: TaskKind,
        #[serde(default = "default_lo")]
        content_lo: usize,
        content_hi: usize,
        min_len: usize,
        max_len: usize,
        train_pairs: usize,
        test_pairs: usize,
    },
    Corpus {
        train_src: PathBuf,
        train_tgt: PathBuf,
        test_src: PathBuf,
        test_tgt: PathBuf,
        #[serde(default)]
        filter: Option<FilterSpec>,
    },
}

fn default_lo() -> usize {
    crate::data::vocab::NUM_RESERVED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    #[serde(flatten)]
    pub source: DomainSource,
}

/// General-purpose data for λ₀: one or more synthetic operations over the
/// shared source distribution, optionally marked with a leading tag token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainData {
    pub tasks: Vec<TaskKind>,
    pub pairs_per_task: usize,
    /// First tag token; task `j` is marked with `tag_start + j`. No tags when absent.
    #[serde(default)]
    pub tag_start: Option<usize>,
    pub content_lo: usize,
    pub content_hi: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionSection {
    pub modes: Vec<ExtensionMode>,
    pub domain: DomainSpec,
    /// Prune fractions for the new domain's mask; the top-level `prune` when absent.
    #[serde(default)]
    pub prune: Option<PruneSpec>,
}

impl ExtensionSection {
    pub fn spec(&self, fallback: PruneSpec) -> PruneSpec {
        self.prune.unwrap_or(fallback)
    }
}

/// Declarative description of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pretrain_data: PretrainData,
    #[serde(rename = "domain")]
    pub domains: Vec<DomainSpec>,
    pub prune: PruneSpec,
    /// Build the initial masks disjoint from each other.
    #[serde(default)]
    pub disjoint_masks: bool,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub extension: Option<ExtensionSection>,
    /// Directory that relative paths are resolved against; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn from_toml(text: &str, root: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        self.prune.validate()?;
        for s in [&self.train.pretrain, &self.train.finetune, &self.train.doss] {
            s.resolve(&self.root)?;
        }
        if let Some(s) = &self.train.extend {
            s.resolve(&self.root)?;
        }
        self.train_config("mask")?;
        if self.domains.is_empty() {
            return Err(Error::Config("manifest defines no domains".into()));
        }
        let mut ids: Vec<&str> = self.domains.iter().map(|d| d.id.as_str()).collect();
        if let Some(ext) = &self.extension {
            if ext.modes.is_empty() {
                return Err(Error::Config("extension lists no modes".into()));
            }
            if let Some(p) = &ext.prune {
                p.validate()?;
            }
            ids.push(&ext.domain.id);
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::Config("domain ids must be unique".into()));
        }
        for d in self.domains.iter().chain(self.extension.as_ref().map(|e| &e.domain)) {
            self.check_domain(d, &model)?;
        }
        let p = &self.pretrain_data;
        if p.tasks.is_empty() || p.pairs_per_task == 0 {
            return Err(Error::Config("pretrain_data needs at least one task and pair".into()));
        }
        let top = match p.tag_start {
            Some(t) => t + p.tasks.len(),
            None => p.content_hi,
        };
        if top.max(p.content_hi) > model.vocab_size {
            return Err(Error::Config("pretraining tokens exceed the vocabulary".into()));
        }
        if let Some(sw) = &self.sweep {
            if sw.alphas.is_empty() || sw.betas.is_empty() {
                return Err(Error::Config("sweep grid is empty".into()));
            }
            for (&a, &b) in sw.alphas.iter().zip(sw.betas.iter().cycle()) {
                PruneSpec::new(a, b)?;
            }
            for &b in &sw.betas {
                PruneSpec::new(sw.alphas[0], b)?;
            }
        }
        Ok(())
    }

    fn check_domain(&self, d: &DomainSpec, model: &ModelConfig) -> Result<()> {
        match &d.source {
            DomainSource::Synthetic { content_lo, content_hi, min_len, max_len, train_pairs, test_pairs, .. } => {
                if *content_hi > model.vocab_size || content_lo >= content_hi {
                    return Err(Error::Config(format!("domain {}: content range outside the vocabulary", d.id)));
                }
                if *min_len == 0 || min_len > max_len || *train_pairs == 0 || *test_pairs == 0 {
                    return Err(Error::Config(format!("domain {}: bad lengths or sizes", d.id)));
                }
            }
            DomainSource::Corpus { train_src, train_tgt, test_src, test_tgt, .. } => {
                for p in [train_src, train_tgt, test_src, test_tgt] {
                    let p = self.root.join(p);
                    if !p.is_file() {
                        return Err(Error::Config(format!("domain {}: missing file {}", d.id, p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Seed for one stage, derived from the global seed and the stage label.
    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn train_config(&self, stage: &str) -> Result<TrainConfig> {
        if stage == "mask" {
            let s = self.train.mask.as_ref().unwrap_or(&self.train.finetune);
            let cfg = s.load(&self.root)?.with_epochs(self.prune.ft_epochs as u64);
            cfg.validate()?;
            return Ok(cfg.with_seed(self.stage_seed(stage)));
        }
        let s = match stage {
            "pretrain" => &self.train.pretrain,
            "finetune" => &self.train.finetune,
            "doss" => &self.train.doss,
            "extend" => self.train.extend.as_ref().unwrap_or(&self.train.finetune),
            other => return Err(Error::Config(format!("unknown stage {other:?}"))),
        };
        Ok(s.resolve(&self.root)?.with_seed(self.stage_seed(stage)))
    }
}

/// SHA-256 over the TOML serialisation of `parts`, as lowercase hex.
pub fn config_hash<T: Serialize + ?Sized>(parts: &T) -> Result<String> {
    let text = toml::to_string(parts).map_err(|e| Error::Config(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

impl DomainSpec {
    /// Train and test splits. Synthetic splits use seeds derived from the
    /// manifest seed and the domain id.
    pub fn load(&self, seed: u64, root: &Path, vocab: Option<&crate::data::Vocab>) -> Result<(DomainDataset, DomainDataset)> {
        match &self.source {
            DomainSource::Synthetic { task, content_lo, content_hi, min_len, max_len, train_pairs, test_pairs } => {
                let mk = |label: &str, n: usize| {
                    let t = SyntheticTask {
                        kind: *task,
                        content_lo: *content_lo,
                        content_hi: *content_hi,
                        min_len: *min_len,
                        max_len: *max_len,
                        seed: derive_seed(seed, &format!("{}/{label}", self.id)),
                    };
                    crate::data::gen_domain(&self.id, &t, n)
                };
                Ok((mk("train", *train_pairs)?, mk("test", *test_pairs)?))
            }
            DomainSource::Corpus { train_src, train_tgt, test_src, test_tgt, filter } => {
                let vocab = vocab.ok_or_else(|| Error::Config(format!("domain {} needs a vocabulary", self.id)))?;
                let f = filter.unwrap_or_default();
                let (train, stats) = crate::data::read_parallel_text(&self.id, &root.join(train_src), &root.join(train_tgt), vocab, &f)?;
                log::info!("domain {}: kept {} pairs, dropped {} long and {} off-ratio", self.id, stats.kept, stats.dropped_length, stats.dropped_ratio);
                let (test, _) = crate::data::read_parallel_text(&self.id, &root.join(test_src), &root.join(test_tgt), vocab, &FilterSpec::keep_all())?;
                Ok((train, test))
            }
        }
    }
}
