//! Prototypical contrastive learning: a fixed-capacity FIFO bank of
//! distractor prototypes from recent steps, negative collection, and the
//! contrastive loss pulling query/support target prototypes together while
//! pushing distractor prototypes away.

use std::collections::VecDeque;

use crate::distractor::DoPrototype;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::types::Prototype;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeOrigin {
    Query,
    Support,
}

/// Which non-target region supplies the negative prototypes; mirrors the
/// negative-sample comparison (distractor objects work best, background and
/// whole-non-target regions are the alternatives).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePolicy {
    DistractorObjects,
    Background,
    NonTarget,
}

impl NegativePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            NegativePolicy::DistractorObjects => "do",
            NegativePolicy::Background => "bg",
            NegativePolicy::NonTarget => "non-target",
        }
    }

    pub fn parse(s: &str) -> Result<NegativePolicy> {
        match s {
            "do" => Ok(NegativePolicy::DistractorObjects),
            "bg" => Ok(NegativePolicy::Background),
            "non-target" => Ok(NegativePolicy::NonTarget),
            other => Err(Error::Config(format!("unknown negative policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub class_id: usize,
    pub origin: PrototypeOrigin,
    pub embedding: Vec<f64>,
}

/// FIFO store of detached prototype embeddings from recent training steps.
/// Eviction is strictly oldest-first; absent prototypes are never stored.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    pushed_total: usize,
    skipped_absent: usize,
}

impl PrototypeBank {
    pub fn new(capacity: usize) -> PrototypeBank {
        PrototypeBank {
            capacity,
            entries: VecDeque::new(),
            pushed_total: 0,
            skipped_absent: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn skipped_absent(&self) -> usize {
        self.skipped_absent
    }

    /// Append prototypes in order, skipping absent ones (their count is
    /// reported) and evicting oldest entries beyond capacity.
    pub fn push(&mut self, protos: &[(usize, PrototypeOrigin, DoPrototype)]) -> usize {
        let mut skipped = 0;
        for (class_id, origin, p) in protos {
            if p.absent {
                skipped += 1;
                continue;
            }
            self.entries.push_back(BankEntry {
                class_id: *class_id,
                origin: *origin,
                embedding: p.prototype.as_slice().to_vec(),
            });
            self.pushed_total += 1;
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        self.skipped_absent += skipped;
        skipped
    }
}

#[derive(Debug, Clone)]
pub struct PclConfig {
    pub temperature: f64,
    /// Include e^{cos(pq,ps)/T} in the denominator (standard InfoNCE); off
    /// by default, keeping the denominator to negatives only.
    pub include_positive_in_denominator: bool,
    /// Restrict bank negatives to entries of the episode's class.
    pub same_class_only: bool,
}

impl Default for PclConfig {
    fn default() -> Self {
        PclConfig {
            temperature: 1.0,
            include_positive_in_denominator: false,
            same_class_only: false,
        }
    }
}

/// Contrastive loss over concrete prototypes (the graph op carries the
/// gradients during training; this wrapper serves inspection and tests).
pub fn pcl_loss(
    p_q: &Prototype,
    p_s: &Prototype,
    negatives: &[Prototype],
    cfg: &PclConfig,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Config("pcl_loss requires at least one negative".into()));
    }
    let mut g = Graph::new();
    let pq = g.constant(crate::tensor::Tensor::vector(p_q.as_slice()));
    let ps = g.constant(crate::tensor::Tensor::vector(p_s.as_slice()));
    let negs: Vec<_> = negatives
        .iter()
        .map(|n| g.constant(crate::tensor::Tensor::vector(n.as_slice())))
        .collect();
    let loss = g.pcl_loss(
        pq,
        ps,
        &negs,
        cfg.temperature,
        cfg.include_positive_in_denominator,
    );
    Ok(g.scalar(loss))
}

/// Negatives for one episode: the episode's own non-absent distractor
/// prototypes (query and support) plus the bank contents under the active
/// class filter.
pub fn collect_episode_negatives(
    bank: &PrototypeBank,
    episode_protos: &[DoPrototype],
    episode_class: usize,
    cfg: &PclConfig,
) -> Vec<Prototype> {
    let mut out: Vec<Prototype> = episode_protos
        .iter()
        .filter(|p| !p.absent)
        .map(|p| p.prototype.clone())
        .collect();
    for e in bank.entries() {
        if cfg.same_class_only && e.class_id != episode_class {
            continue;
        }
        out.push(Prototype::new(e.embedding.clone()));
    }
    out
}
