//! Pipeline stages and the cached end-to-end runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::artifacts::{is_valid, read_meta, write_artifact};
use super::manifest::{config_hash, ExperimentManifest};
use super::sweep::run_sweep;
use crate::data::dataset::{decode_dataset as decode_data, encode_dataset};
use crate::data::{vocab_from_files, DomainDataset, SyntheticTask, Vocab};
use crate::error::{Error, Result};
use crate::eval::{decode_dataset, eval_matrix, EvalOptions, Variant};
use crate::mask::{
    decode_mask, encode_mask, finetune_for_mask, frozen_checksum, magnitude_prune, magnitude_prune_disjoint,
    overlap_stats, overlay, DomainMask, MaskSet,
};
use crate::model::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::model::{build_model, count_params, ModelConfig, ParamStore, ParameterRegistry};
use crate::train::{extend_domain, train_doss, train_full, Extension, ExtensionMode, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Pretrain,
    Finetune,
    Masks,
    Doss,
    Extend,
    Sweep,
    Eval,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::Data,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Masks,
        Stage::Doss,
        Stage::Extend,
        Stage::Sweep,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Masks => "masks",
            Stage::Doss => "doss",
            Stage::Extend => "extend",
            Stage::Sweep => "sweep",
            Stage::Eval => "eval",
        }
    }
}

/// What `run` did with each stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub ran: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
}

pub struct Pipeline {
    pub manifest: ExperimentManifest,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub threads: usize,
}

#[derive(Serialize)]
struct HashInput<'a, T: Serialize> {
    upstream: &'a str,
    stage: &'a str,
    config: T,
}

impl Pipeline {
    pub fn new(manifest: ExperimentManifest, out: PathBuf, threads: usize) -> Result<Self> {
        let model = manifest.model()?;
        Ok(Self { manifest, out, model, threads: threads.max(1) })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Extend => self.manifest.extension.is_some(),
            Stage::Sweep => self.manifest.sweep.is_some(),
            _ => true,
        }
    }

    /// Hash of everything that determines a stage's outputs, chained through
    /// the stages before it.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let mut prev = String::new();
        for s in Stage::ORDER {
            let m = &self.manifest;
            let name = s.name();
            prev = match s {
                Stage::Data => {
                    #[derive(Serialize)]
                    struct D<'a> {
                        seed: u64,
                        vocab_size: usize,
                        domains: &'a [super::manifest::DomainSpec],
                        extension: Option<&'a super::manifest::DomainSpec>,
                        general: &'a super::manifest::PretrainData,
                    }
                    let d = D {
                        seed: m.seed,
                        vocab_size: self.model.vocab_size,
                        domains: &m.domains,
                        extension: m.extension.as_ref().map(|e| &e.domain),
                        general: &m.pretrain_data,
                    };
                    config_hash(&HashInput { upstream: &prev, stage: name, config: d })?
                }
                Stage::Pretrain => {
                    let c = (&self.model, m.train_config("pretrain")?);
                    config_hash(&HashInput { upstream: &prev, stage: name, config: c })?
                }
                Stage::Finetune => config_hash(&HashInput { upstream: &prev, stage: name, config: m.train_config("finetune")? })?,
                Stage::Masks => {
                    let c = (m.prune, m.disjoint_masks, m.train_config("mask")?);
                    config_hash(&HashInput { upstream: &prev, stage: name, config: c })?
                }
                Stage::Doss => config_hash(&HashInput { upstream: &prev, stage: name, config: m.train_config("doss")? })?,
                Stage::Extend => {
                    let c = (&m.extension, m.train_config("mask")?, m.train_config("extend")?);
                    config_hash(&HashInput { upstream: &prev, stage: name, config: c })?
                }
                Stage::Sweep => config_hash(&HashInput { upstream: &prev, stage: name, config: &m.sweep })?,
                Stage::Eval => config_hash(&HashInput { upstream: &prev, stage: name, config: "tables" })?,
            };
            if s == stage {
                break;
            }
        }
        Ok(prev)
    }

    fn receipt_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("{}/receipt.txt", stage.name()))
    }

    /// A stage is cached when its receipt and every file it lists are intact
    /// and were produced under `hash`.
    pub fn is_cached(&self, stage: Stage, hash: &str) -> bool {
        let receipt = self.receipt_path(stage);
        if !is_valid(&receipt, hash) {
            return false;
        }
        let Ok(text) = fs::read_to_string(&receipt) else { return false };
        text.lines().filter(|l| !l.is_empty()).all(|rel| is_valid(&self.out.join(rel), hash))
    }

    /// Runs every enabled stage, skipping cached ones. Once a stage reruns,
    /// all later stages rerun too.
    pub fn run(&self) -> Result<RunSummary> {
        let mut summary = RunSummary::default();
        let mut dirty = false;
        for stage in Stage::ORDER {
            if !self.enabled(stage) {
                continue;
            }
            let hash = self.stage_hash(stage)?;
            if !dirty && self.is_cached(stage, &hash) {
                log::info!("stage {}: cached", stage.name());
                summary.skipped.push(stage.name());
                continue;
            }
            self.run_stage(stage)?;
            dirty = true;
            summary.ran.push(stage.name());
        }
        Ok(summary)
    }

    /// Runs one stage unconditionally; its inputs must already exist.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        log::info!("stage {}: running", stage.name());
        let hash = self.stage_hash(stage)?;
        let mut w = Writer { out: &self.out, hash: &hash, written: Vec::new() };
        let r = match stage {
            Stage::Data => self.stage_data(&mut w),
            Stage::Pretrain => self.stage_pretrain(&mut w),
            Stage::Finetune => self.stage_finetune(&mut w),
            Stage::Masks => self.stage_masks(&mut w),
            Stage::Doss => self.stage_doss(&mut w),
            Stage::Extend => self.stage_extend(&mut w),
            Stage::Sweep => self.stage_sweep(&mut w),
            Stage::Eval => self.stage_eval(&mut w),
        };
        r.map_err(|e| Error::Stage { stage: stage.name(), source: Box::new(e) })?;
        let receipt = w.written.join("\n") + "\n";
        write_artifact(&self.receipt_path(stage), receipt.as_bytes(), &hash)
    }

    // ---- loading helpers ----

    fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let p = self.path(rel);
        fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Input(format!("missing input {} (run the producing stage first)", p.display())),
            _ => Error::io(&p, e),
        })
    }

    pub fn load_params(&self, rel: &str) -> Result<ParamStore> {
        decode_checkpoint(&self.read(rel)?, &self.path(rel))
    }

    pub fn load_data(&self, id: &str, split: &str) -> Result<DomainDataset> {
        let rel = format!("data/{id}.{split}.dat");
        decode_data(&self.read(&rel)?, &self.path(&rel))
    }

    pub fn registry(&self) -> Result<ParameterRegistry> {
        crate::model::build_registry(&self.model)
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.manifest.domains.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn load_masks(&self, dir: &str, ids: &[&str]) -> Result<MaskSet> {
        let masks = ids
            .iter()
            .map(|id| {
                let rel = format!("{dir}/{id}.mask");
                decode_mask(&self.read(&rel)?, &self.path(&rel))
            })
            .collect::<Result<Vec<_>>>()?;
        let disjoint = self.manifest.disjoint_masks && dir == "masks";
        MaskSet::from_masks(masks, disjoint)
    }

    fn datasets(&self, split: &str) -> Result<Vec<DomainDataset>> {
        self.domain_ids().iter().map(|id| self.load_data(id, split)).collect()
    }

    // ---- stages ----

    fn corpus_vocab(&self) -> Result<Option<Vocab>> {
        use super::manifest::DomainSource;
        let root = &self.manifest.root;
        let mut files = Vec::new();
        for d in self.manifest.domains.iter().chain(self.manifest.extension.as_ref().map(|e| &e.domain)) {
            if let DomainSource::Corpus { train_src, train_tgt, test_src, test_tgt, .. } = &d.source {
                files.extend([train_src, train_tgt, test_src, test_tgt].map(|p| root.join(p)));
            }
        }
        if files.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
        let vocab = vocab_from_files(&refs)?;
        if vocab.len() > self.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary has {} entries but the model has {}",
                vocab.len(),
                self.model.vocab_size
            )));
        }
        Ok(Some(vocab))
    }

    fn stage_data(&self, w: &mut Writer<'_>) -> Result<()> {
        let m = &self.manifest;
        let vocab = self.corpus_vocab()?;
        for d in m.domains.iter().chain(m.extension.as_ref().map(|e| &e.domain)) {
            let (train, test) = d.load(m.seed, &m.root, vocab.as_ref())?;
            train.check_vocab(self.model.vocab_size)?;
            test.check_vocab(self.model.vocab_size)?;
            w.write(&format!("data/{}.train.dat", d.id), &encode_dataset(&train))?;
            w.write(&format!("data/{}.test.dat", d.id), &encode_dataset(&test))?;
        }
        if let Some(v) = &vocab {
            let words: Vec<&str> = (0..v.len()).filter_map(|i| v.word(i)).collect();
            w.write("data/vocab.txt", (words.join("\n") + "\n").as_bytes())?;
        }
        let general = general_data(m)?;
        w.write("data/general.train.dat", &encode_dataset(&general))
    }

    fn stage_pretrain(&self, w: &mut Writer<'_>) -> Result<()> {
        let (init, registry) = build_model(&self.model, self.manifest.stage_seed("init"))?;
        let general = self.load_data("general", "train")?;
        let cfg = self.manifest.train_config("pretrain")?;
        let (mut lambda0, log) = train_full(&init, &registry, &self.model, &[&general], &cfg)?;
        lambda0.round_to_f32();
        w.write("pretrain/lambda0.ckpt", &encode_checkpoint(&lambda0)?)?;
        w.write("pretrain/lambda0.ckpt.registry", registry.to_sidecar().as_bytes())?;
        w.write("pretrain/metrics.csv", log.to_csv().as_bytes())?;
        w.write("pretrain/lambda0.ckpt.state", state_text(&log, &lambda0).as_bytes())
    }

    fn stage_finetune(&self, w: &mut Writer<'_>) -> Result<()> {
        let lambda0 = self.load_params("pretrain/lambda0.ckpt")?;
        let registry = self.registry()?;
        let train = self.datasets("train")?;
        let cfg = self.manifest.train_config("finetune")?;
        for d in &train {
            let c = cfg.clone().with_seed(self.manifest.stage_seed(&format!("finetune/{}", d.domain_id())));
            let (mut p, log) = train_full(&lambda0, &registry, &self.model, &[d], &c)?;
            p.round_to_f32();
            w.write(&format!("finetune/{}.ckpt", d.domain_id()), &encode_checkpoint(&p)?)?;
            w.write(&format!("finetune/{}.metrics.csv", d.domain_id()), log.to_csv().as_bytes())?;
        }
        let refs: Vec<&DomainDataset> = train.iter().collect();
        let c = cfg.with_seed(self.manifest.stage_seed("finetune/all"));
        let (mut p, log) = train_full(&lambda0, &registry, &self.model, &refs, &c)?;
        p.round_to_f32();
        w.write("finetune/all.ckpt", &encode_checkpoint(&p)?)?;
        w.write("finetune/all.metrics.csv", log.to_csv().as_bytes())
    }

    fn stage_masks(&self, w: &mut Writer<'_>) -> Result<()> {
        let m = &self.manifest;
        let lambda0 = self.load_params("pretrain/lambda0.ckpt")?;
        let registry = self.registry()?;
        let train = self.datasets("train")?;
        let cfg = m.train_config("mask")?;
        let mut masks = if m.disjoint_masks { MaskSet::new_disjoint() } else { MaskSet::new() };
        for d in &train {
            let c = cfg.clone().with_seed(m.stage_seed(&format!("masks/{}", d.domain_id())));
            let mut tuned = finetune_for_mask(&lambda0, &registry, &self.model, d, m.prune.ft_epochs, &c)?;
            tuned.round_to_f32();
            w.write(&format!("masks/{}.finetuned.ckpt", d.domain_id()), &encode_checkpoint(&tuned)?)?;
            let mut mask = if m.disjoint_masks && !masks.is_empty() {
                magnitude_prune_disjoint(&tuned, &registry, &m.prune, &masks)?
            } else {
                magnitude_prune(&tuned, &registry, &m.prune)?
            };
            mask.domain_id = d.domain_id().to_string();
            w.write(&format!("masks/{}.mask", d.domain_id()), &encode_mask(&mask)?)?;
            masks.push(mask)?;
        }
        w.write("masks/overlap.csv", overlap_stats(&masks)?.to_csv().as_bytes())
    }

    fn stage_doss(&self, w: &mut Writer<'_>) -> Result<()> {
        let lambda0 = self.load_params("pretrain/lambda0.ckpt")?;
        let registry = self.registry()?;
        let train = self.datasets("train")?;
        let masks = self.load_masks("masks", &self.domain_ids())?;
        let cfg = self.manifest.train_config("doss")?;
        let refs: Vec<&DomainDataset> = train.iter().collect();
        let (mut lambda, log) = train_doss(&lambda0, &registry, &self.model, &masks, &refs, &cfg)?;
        lambda.round_to_f32();
        let before = frozen_checksum(&lambda0, &masks)?;
        let after = frozen_checksum(&lambda, &masks)?;
        if before != after {
            return Err(Error::Mask("parameters outside every mask changed during joint training".into()));
        }
        w.write("doss/lambda.ckpt", &encode_checkpoint(&lambda)?)?;
        w.write("doss/metrics.csv", log.to_csv().as_bytes())?;
        w.write("doss/frozen_check.txt", format!("before {before}\nafter {after}\n").as_bytes())
    }

    fn stage_extend(&self, w: &mut Writer<'_>) -> Result<()> {
        let m = &self.manifest;
        let ext = m.extension.as_ref().ok_or_else(|| Error::Config("manifest has no extension section".into()))?;
        let lambda0 = self.load_params("pretrain/lambda0.ckpt")?;
        let lambda = self.load_params("doss/lambda.ckpt")?;
        let registry = self.registry()?;
        let ids = self.domain_ids();
        let masks = self.load_masks("masks", &ids)?;
        let train = self.datasets("train")?;
        let tests = self.datasets("test")?;
        let new_data = self.load_data(&ext.domain.id, "train")?;
        let refs: Vec<&DomainDataset> = train.iter().collect();
        let mask_cfg = m.train_config("mask")?.with_seed(m.stage_seed(&format!("masks/{}", ext.domain.id)));
        let train_cfg = m.train_config("extend")?;
        let e = Extension {
            registry: &registry,
            model: &self.model,
            base: &lambda0,
            existing: &refs,
            spec: ext.spec(m.prune),
            mask_cfg: &mask_cfg,
            train_cfg: &train_cfg,
        };
        let before: Vec<Vec<Vec<usize>>> = ids
            .iter()
            .zip(&tests)
            .map(|(id, t)| {
                let p = overlay(&lambda0, &lambda, masks.get(id).expect("loaded above"))?;
                decode_dataset(&p, &self.model, t, EvalOptions::default())
            })
            .collect::<Result<_>>()?;
        for &mode in &ext.modes {
            let mut outcome = extend_domain(&e, &lambda, &masks, &new_data, mode)?;
            outcome.params.round_to_f32();
            let dir = format!("extend/{mode}");
            w.write(&format!("{dir}/lambda.ckpt"), &encode_checkpoint(&outcome.params)?)?;
            let new_mask = outcome.masks.get(&ext.domain.id).expect("extension adds the new mask");
            w.write(&format!("{dir}/{}.mask", ext.domain.id), &encode_mask(new_mask)?)?;
            w.write(&format!("{dir}/metrics.csv"), outcome.log.to_csv().as_bytes())?;
            w.write(&format!("{dir}/trainable.txt"), format!("{}\n", outcome.trainable).as_bytes())?;
            let mut diff = String::new();
            for ((id, t), prev) in ids.iter().zip(&tests).zip(&before) {
                let p = overlay(&lambda0, &outcome.params, masks.get(id).expect("loaded above"))?;
                let now = decode_dataset(&p, &self.model, t, EvalOptions::default())?;
                for (i, (a, b)) in prev.iter().zip(&now).enumerate() {
                    if a != b {
                        let _ = writeln!(diff, "{id}\t{i}\t{a:?}\t{b:?}");
                    }
                }
            }
            w.write(&format!("{dir}/preservation_diff.txt"), diff.as_bytes())?;
            log::info!("extension {mode}: {} trainable, {} changed old-domain outputs", outcome.trainable, diff.lines().count());
        }
        Ok(())
    }

    fn stage_sweep(&self, w: &mut Writer<'_>) -> Result<()> {
        let m = &self.manifest;
        let sweep = m.sweep.as_ref().ok_or_else(|| Error::Config("manifest has no sweep section".into()))?;
        let lambda0 = self.load_params("pretrain/lambda0.ckpt")?;
        let registry = self.registry()?;
        let ids = self.domain_ids();
        let tuned = ids
            .iter()
            .map(|id| self.load_params(&format!("masks/{id}.finetuned.ckpt")))
            .collect::<Result<Vec<_>>>()?;
        let train = self.datasets("train")?;
        let tests = self.datasets("test")?;
        let result = run_sweep(
            &super::sweep::SweepInputs {
                model: &self.model,
                registry: &registry,
                base: &lambda0,
                tuned: &tuned,
                train: &train,
                test: &tests,
                ft_epochs: m.prune.ft_epochs,
                disjoint: m.disjoint_masks,
                doss_cfg: &m.train_config("doss")?,
            },
            sweep,
            self.threads,
        );
        w.write("sweep/sweep.csv", result.to_csv(&ids).as_bytes())?;
        w.write("sweep/correlation.txt", result.correlation_text().as_bytes())
    }

    fn stage_eval(&self, w: &mut Writer<'_>) -> Result<()> {
        let lambda0 = self.load_params("pretrain/lambda0.ckpt")?;
        let registry = self.registry()?;
        let total = count_params(&registry, None)?.total;
        let ids = self.domain_ids();
        let tests = self.datasets("test")?;
        let test_refs: Vec<&DomainDataset> = tests.iter().collect();
        let ft: Vec<ParamStore> = ids.iter().map(|id| self.load_params(&format!("finetune/{id}.ckpt"))).collect::<Result<_>>()?;
        let all = self.load_params("finetune/all.ckpt")?;
        let lambda = self.load_params("doss/lambda.ckpt")?;
        let masks = self.load_masks("masks", &ids)?;
        let union_ones = masks.union()?.map_or(0, |u| u.count_ones());
        let mut variants = vec![Variant::Plain { name: "Baseline".into(), params: &lambda0, trainable: 0 }];
        for (id, p) in ids.iter().zip(&ft) {
            variants.push(Variant::Plain { name: format!("FT-{id}"), params: p, trainable: total });
        }
        variants.push(Variant::Plain { name: "All-FT".into(), params: &all, trainable: total });
        variants.push(Variant::Doss { name: "DoSS".into(), base: &lambda0, trained: &lambda, masks: &masks, trainable: union_ones });
        let report = eval_matrix(&variants, &test_refs, &self.model, EvalOptions::default())?;
        let header = format!("<!-- config hash {} -->\n", w.hash);
        w.write("eval/table2.md", (header.clone() + &report.to_markdown()).as_bytes())?;
        w.write("eval/table2.csv", report.to_csv().as_bytes())?;

        if let Some(ext) = &self.manifest.extension {
            let new_test = self.load_data(&ext.domain.id, "test")?;
            let mut all_tests = test_refs.clone();
            all_tests.push(&new_test);
            let mut loaded = Vec::new();
            for mode in &ext.modes {
                let dir = format!("extend/{mode}");
                let params = self.load_params(&format!("{dir}/lambda.ckpt"))?;
                let mut set = if *mode == ExtensionMode::NewOnlyDisjoint {
                    masks.clone()
                } else {
                    MaskSet::from_masks(masks.iter().cloned().collect(), false)?
                };
                let rel = format!("{dir}/{}.mask", ext.domain.id);
                let new_mask: DomainMask = decode_mask(&self.read(&rel)?, &self.path(&rel))?;
                set.push(new_mask)?;
                // joint continuation trains every mask; the other modes only the new one
                let trainable = match mode {
                    ExtensionMode::AllMasksJoint => set.union()?.map_or(0, |u| u.count_ones()),
                    _ => set.get(&ext.domain.id).map_or(0, DomainMask::count_ones),
                };
                loaded.push((mode.to_string(), params, set, trainable));
            }
            let mut variants = vec![
                Variant::Plain { name: "Baseline".into(), params: &lambda0, trainable: 0 },
                Variant::Plain { name: "All-FT".into(), params: &all, trainable: total },
            ];
            variants.extend(loaded.iter().map(|(name, params, set, trainable)| Variant::Doss {
                name: name.clone(),
                base: &lambda0,
                trained: params,
                masks: set,
                trainable: *trainable,
            }));
            let report = eval_matrix(&variants, &all_tests, &self.model, EvalOptions::default())?;
            w.write("eval/table4.md", (header + &report.to_markdown()).as_bytes())?;
            w.write("eval/table4.csv", report.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

/// Writes artifacts under one config hash and remembers their paths.
struct Writer<'a> {
    out: &'a Path,
    hash: &'a str,
    written: Vec<String>,
}

impl Writer<'_> {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_artifact(&self.out.join(rel), bytes, self.hash)?;
        self.written.push(rel.to_string());
        Ok(())
    }
}

fn state_text(log: &TrainLog, params: &ParamStore) -> String {
    let last = log.rows.last();
    format!(
        "steps = {}\nfinal_loss = {}\nchecksum = \"{}\"\n",
        log.steps(),
        last.map_or(f64::NAN, |r| r.loss),
        params.checksum()
    )
}

/// General-domain pretraining pairs described by the manifest.
pub fn general_data(m: &ExperimentManifest) -> Result<DomainDataset> {
    let g = &m.pretrain_data;
    let mut pairs = Vec::new();
    for (j, kind) in g.tasks.iter().enumerate() {
        let task = SyntheticTask {
            kind: *kind,
            content_lo: g.content_lo,
            content_hi: g.content_hi,
            min_len: g.min_len,
            max_len: g.max_len,
            seed: m.stage_seed(&format!("general/{kind}")),
        };
        let d = crate::data::gen_domain("general", &task, g.pairs_per_task)?;
        for (src, tgt) in d.pairs() {
            let src = match g.tag_start {
                Some(t) => std::iter::once(t + j).chain(src.iter().copied()).collect(),
                None => src.clone(),
            };
            pairs.push((src, tgt.clone()));
        }
    }
    DomainDataset::new("general", pairs)
}

/// Checks that the receipt of `stage` was produced under the current hash.
pub fn receipt_hash(p: &Pipeline, stage: Stage) -> Result<String> {
    Ok(read_meta(&p.receipt_path(stage))?.config_hash)
}
