use std::fmt::Write as _;

use super::decode::greedy_decode;
use super::metrics::{corpus_bleu, exact_match};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::mask::{overlay, MaskSet};
use crate::model::{ModelConfig, ParamStore};

/// A model to evaluate: plain parameters, or a DoSS model whose parameters
/// for domain `i` are `overlay(base, trained, masks[i])`.
pub enum Variant<'a> {
    Plain {
        name: String,
        params: &'a ParamStore,
        trainable: u64,
    },
    Doss {
        name: String,
        base: &'a ParamStore,
        trained: &'a ParamStore,
        masks: &'a MaskSet,
        trainable: u64,
    },
}

impl Variant<'_> {
    pub fn name(&self) -> &str {
        match self {
            Variant::Plain { name, .. } | Variant::Doss { name, .. } => name,
        }
    }

    pub fn trainable(&self) -> u64 {
        match self {
            Variant::Plain { trainable, .. } | Variant::Doss { trainable, .. } => *trainable,
        }
    }

    /// Parameters used for `domain_id`.
    pub fn effective(&self, domain_id: &str) -> Result<std::borrow::Cow<'_, ParamStore>> {
        match self {
            Variant::Plain { params, .. } => Ok(std::borrow::Cow::Borrowed(*params)),
            Variant::Doss { name, base, trained, masks, .. } => {
                let m = masks
                    .get(domain_id)
                    .ok_or_else(|| Error::Mask(format!("variant {name} has no mask for domain {domain_id}")))?;
                Ok(std::borrow::Cow::Owned(overlay(base, trained, m)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub bleu: f64,
    pub exact_match: f64,
    pub n_sentences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub trainable: u64,
    pub cells: Vec<Cell>,
}

impl ReportRow {
    pub fn average_bleu(&self) -> f64 {
        self.cells.iter().map(|c| c.bleu).sum::<f64>() / self.cells.len() as f64
    }

    pub fn average_exact_match(&self) -> f64 {
        self.cells.iter().map(|c| c.exact_match).sum::<f64>() / self.cells.len() as f64
    }
}

/// Variants × domains table of BLEU and exact match.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn cell(&self, variant: &str, domain: &str) -> Option<&Cell> {
        let d = self.domains.iter().position(|x| x == domain)?;
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.cells[d])
    }

    pub fn row(&self, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Model | N.P. |");
        for d in &self.domains {
            let _ = write!(s, " {d} BLEU | {d} EM |");
        }
        s.push_str(" Average BLEU | Average EM |\n|---|---:|");
        for _ in &self.domains {
            s.push_str("---:|---:|");
        }
        s.push_str("---:|---:|\n");
        for r in &self.rows {
            let _ = write!(s, "| {} | {} |", r.variant, r.trainable);
            for c in &r.cells {
                let _ = write!(s, " {:.2} | {:.3} |", c.bleu, c.exact_match);
            }
            let _ = writeln!(s, " {:.2} | {:.3} |", r.average_bleu(), r.average_exact_match());
        }
        s
    }

    /// Long format: one line per (variant, domain) plus an `average` line per variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,trainable,domain,bleu,exact_match,n_sentences\n");
        for r in &self.rows {
            for (d, c) in self.domains.iter().zip(&r.cells) {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.trainable, d, c.bleu, c.exact_match, c.n_sentences);
            }
            let n: usize = r.cells.iter().map(|c| c.n_sentences).sum();
            let _ = writeln!(s, "{},{},average,{},{},{}", r.variant, r.trainable, r.average_bleu(), r.average_exact_match(), n);
        }
        s
    }
}

/// Decoding settings for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Generated tokens allowed beyond the source length.
    pub extra_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 64, extra_len: 8 }
    }
}

/// Decodes every source of `data` with `params`.
pub fn decode_dataset(params: &ParamStore, config: &ModelConfig, data: &DomainDataset, opts: EvalOptions) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.pairs().chunks(opts.batch_size.max(1)) {
        let src: Vec<&[usize]> = chunk.iter().map(|p| p.0.as_slice()).collect();
        let longest = src.iter().map(|s| s.len()).max().unwrap_or(0);
        out.extend(greedy_decode(params, config, &src, longest + opts.extra_len)?);
    }
    Ok(out)
}

/// Scores one set of parameters on one dataset.
pub fn eval_cell(params: &ParamStore, config: &ModelConfig, data: &DomainDataset, opts: EvalOptions) -> Result<Cell> {
    let hyps = decode_dataset(params, config, data, opts)?;
    let refs: Vec<&[usize]> = data.pairs().iter().map(|p| p.1.as_slice()).collect();
    Ok(Cell {
        bleu: corpus_bleu(&hyps, &refs, 4)?,
        exact_match: exact_match(&hyps, &refs)?,
        n_sentences: data.len(),
    })
}

pub fn eval_matrix(variants: &[Variant<'_>], domains: &[&DomainDataset], config: &ModelConfig, opts: EvalOptions) -> Result<EvalReport> {
    if domains.is_empty() {
        return Err(Error::Input("no domains to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cells = Vec::with_capacity(domains.len());
        for d in domains {
            let params = v.effective(d.domain_id())?;
            cells.push(eval_cell(&params, config, d, opts)?);
            log::debug!("evaluated {} on {}", v.name(), d.domain_id());
        }
        rows.push(ReportRow { variant: v.name().to_string(), trainable: v.trainable(), cells });
    }
    Ok(EvalReport {
        domains: domains.iter().map(|d| d.domain_id().to_string()).collect(),
        rows,
    })
}
