//! Greedy layer-wise bit-width allocation.
//!
//! Every quantizable site is an entry starting at 8 bits. Each step picks
//! the entry with the largest selection score
//! `alpha = SQNR_(b-1) * log10(numel)` (or SQNR alone in the ablation mode),
//! drops it by one bit, and recomputes only that entry's score, until the
//! mean bit-width of the kind reaches its target. Weights are processed
//! first by default; the order is swappable.
//!
//! `numel` for activation entries is the per-sample activation size, so
//! scores do not depend on the calibration batch size.

use crate::error::{Error, Result};
use crate::gelu_quant::{self, GeluStats, RegionQuantizer};
use crate::model::{ActClass, SiteKind};
use crate::quant::{self, sqnr_db};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Mutex;

/// No entry drops below this many bits; floored entries leave the pool.
pub const BIT_FLOOR: u8 = 2;

/// Bits every entry starts from (W8A8).
pub const START_BITS: u8 = 8;

/// Region quantizers need at least this many bits; below it a post-GeLU
/// entry falls back to the uniform quantizer.
pub const REGION_MIN_BITS: u8 = 4;

/// One allocatable site.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntry {
    pub layer_id: String,
    pub kind: SiteKind,
    pub class: Option<ActClass>,
    pub element_count: usize,
    pub current_bits: u8,
    pub tensor_index: usize,
    pub at_floor: bool,
}

impl LayerEntry {
    pub fn new(
        layer_id: String,
        kind: SiteKind,
        class: Option<ActClass>,
        element_count: usize,
        tensor_index: usize,
    ) -> Self {
        LayerEntry {
            layer_id,
            kind,
            class,
            element_count,
            current_bits: START_BITS,
            tensor_index,
            at_floor: false,
        }
    }
}

/// Selection metric flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricMode {
    #[serde(rename = "sqnr-times-lognumel")]
    SqnrTimesLogNumel,
    #[serde(rename = "sqnr-only")]
    SqnrOnly,
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqnr-times-lognumel" => Ok(MetricMode::SqnrTimesLogNumel),
            "sqnr-only" => Ok(MetricMode::SqnrOnly),
            other => Err(Error::Input(format!("unknown metric mode '{other}'"))),
        }
    }
}

/// Which kind is reduced first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocOrder {
    #[serde(rename = "weights-first")]
    WeightsFirst,
    #[serde(rename = "activations-first")]
    ActivationsFirst,
}

impl std::str::FromStr for AllocOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights-first" => Ok(AllocOrder::WeightsFirst),
            "activations-first" => Ok(AllocOrder::ActivationsFirst),
            other => Err(Error::Input(format!("unknown allocation order '{other}'"))),
        }
    }
}

/// SQNR source for the allocator; production fits quantizers on cached
/// calibration tensors, tests may use fixed tables.
pub trait BitScorer {
    fn sqnr_at(&self, entry: &LayerEntry, bits: u8) -> Result<f64>;
}

/// Scores entries against their cached tensors: minmax uniform quantization
/// for weights and generic activations, the fitted region quantizer for
/// post-GeLU activations at 4 bits and above. Fitted quantizers and scores
/// are memoized per (tensor, bits).
pub struct TensorScorer {
    tensors: Vec<Tensor>,
    gelu_stats: BTreeMap<usize, GeluStats>,
    sqnr_cache: Mutex<BTreeMap<(usize, u8), f64>>,
    region_cache: Mutex<BTreeMap<(usize, u8), RegionQuantizer>>,
}

impl TensorScorer {
    /// `tensors` are indexed by `LayerEntry::tensor_index`; `gelu_stats`
    /// maps post-GeLU tensor indices to their calibration bounds.
    pub fn new(tensors: Vec<Tensor>, gelu_stats: BTreeMap<usize, GeluStats>) -> Self {
        TensorScorer {
            tensors,
            gelu_stats,
            sqnr_cache: Mutex::new(BTreeMap::new()),
            region_cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    fn uses_region(&self, entry: &LayerEntry, bits: u8) -> bool {
        entry.class == Some(ActClass::PostGelu)
            && bits >= REGION_MIN_BITS
            && self.gelu_stats.contains_key(&entry.tensor_index)
    }

    /// The fitted region quantizer for a post-GeLU tensor at `bits`.
    pub fn region_quantizer(&self, tensor_index: usize, bits: u8) -> Result<RegionQuantizer> {
        if let Some(rq) = self.region_cache.lock().unwrap().get(&(tensor_index, bits)) {
            return Ok(*rq);
        }
        let stats = self
            .gelu_stats
            .get(&tensor_index)
            .ok_or_else(|| Error::Fit(format!("no gelu stats for tensor index {tensor_index}")))?;
        let rq = gelu_quant::fit_s0(&self.tensors[tensor_index], bits, *stats, quant::mse)?;
        self.region_cache
            .lock()
            .unwrap()
            .insert((tensor_index, bits), rq);
        Ok(rq)
    }

    /// Fake-quantize the entry's tensor with the quantizer that
    /// `apply_allocation` would use at this bit-width.
    pub fn reconstruct(&self, entry: &LayerEntry, bits: u8) -> Result<Tensor> {
        if self.uses_region(entry, bits) {
            let rq = self.region_quantizer(entry.tensor_index, bits)?;
            gelu_quant::region_fake_quantize(&self.tensors[entry.tensor_index], &rq)
        } else {
            let t = &self.tensors[entry.tensor_index];
            quant::fake_quantize(t, quant::minmax_scale(t, bits)?)
        }
    }
}

impl BitScorer for TensorScorer {
    fn sqnr_at(&self, entry: &LayerEntry, bits: u8) -> Result<f64> {
        let key = (entry.tensor_index, bits);
        if let Some(&db) = self.sqnr_cache.lock().unwrap().get(&key) {
            return Ok(db);
        }
        let t = &self.tensors[entry.tensor_index];
        let db = sqnr_db(t, &self.reconstruct(entry, bits)?)?;
        self.sqnr_cache.lock().unwrap().insert(key, db);
        Ok(db)
    }
}

/// Fixed SQNR table keyed by `(tensor_index, bits)`, for table-driven tests
/// and simulators.
pub struct TableScorer {
    pub table: BTreeMap<(usize, u8), f64>,
}

impl BitScorer for TableScorer {
    fn sqnr_at(&self, entry: &LayerEntry, bits: u8) -> Result<f64> {
        self.table
            .get(&(entry.tensor_index, bits))
            .copied()
            .ok_or_else(|| {
                Error::Allocation(format!(
                    "no table entry for ({}, {bits})",
                    entry.tensor_index
                ))
            })
    }
}

/// Score an entry for the next decrement. Floored entries score negative
/// infinity; the `log10(numel)` factor makes a single-element layer score
/// exactly zero regardless of its SQNR.
pub fn selection_score(
    entry: &LayerEntry,
    scorer: &impl BitScorer,
    mode: MetricMode,
) -> Result<f64> {
    if entry.at_floor || entry.current_bits <= BIT_FLOOR {
        return Ok(f64::NEG_INFINITY);
    }
    let sqnr = scorer.sqnr_at(entry, entry.current_bits - 1)?;
    Ok(match mode {
        MetricMode::SqnrOnly => sqnr,
        MetricMode::SqnrTimesLogNumel => {
            let lg = (entry.element_count as f64).log10();
            if lg == 0.0 {
                0.0
            } else {
                sqnr * lg
            }
        }
    })
}

/// Allocation targets and bookkeeping while the greedy loop runs.
#[derive(Debug, Clone)]
pub struct AllocationState {
    pub entries: Vec<LayerEntry>,
    pub scores: BTreeMap<String, f64>,
    pub target_weight_bits: f64,
    pub target_act_bits: f64,
    pub metric_mode: MetricMode,
    pub order: AllocOrder,
    /// Weight the mean by element counts instead of per-entry (off by
    /// default; the targets then bound the element-weighted average).
    pub element_weighted: bool,
}

impl AllocationState {
    pub fn new(
        entries: Vec<LayerEntry>,
        target_weight_bits: f64,
        target_act_bits: f64,
        metric_mode: MetricMode,
    ) -> Self {
        AllocationState {
            entries,
            scores: BTreeMap::new(),
            target_weight_bits,
            target_act_bits,
            metric_mode,
            order: AllocOrder::WeightsFirst,
            element_weighted: false,
        }
    }

    /// Mean bit-width over entries of one kind.
    pub fn mean_bits(&self, kind: SiteKind) -> f64 {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for e in self.entries.iter().filter(|e| e.kind == kind) {
            let w = if self.element_weighted {
                e.element_count as f64
            } else {
                1.0
            };
            num += e.current_bits as f64 * w;
            den += w;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// One greedy step for the plan trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub layer_id: String,
    pub new_bits: u8,
    #[serde(with = "crate::floats")]
    pub alpha: f64,
}

/// Run the greedy loop for both kinds in the configured order. Entries must
/// start at 8 bits. Returns the step trace; final bits live in the state.
pub fn greedy_allocate(
    state: &mut AllocationState,
    scorer: &impl BitScorer,
) -> Result<Vec<TraceStep>> {
    for e in &state.entries {
        if e.current_bits != START_BITS {
            return Err(Error::Allocation(format!(
                "entry {} starts at {} bits; the greedy loop assumes W8A8",
                e.layer_id, e.current_bits
            )));
        }
    }
    let kinds = match state.order {
        AllocOrder::WeightsFirst => [SiteKind::Weight, SiteKind::Activation],
        AllocOrder::ActivationsFirst => [SiteKind::Activation, SiteKind::Weight],
    };
    let mut trace = Vec::new();
    let mut step = 0usize;
    for kind in kinds {
        let target = match kind {
            SiteKind::Weight => state.target_weight_bits,
            SiteKind::Activation => state.target_act_bits,
        };
        if !state.entries.iter().any(|e| e.kind == kind) {
            continue;
        }
        // initialize scores for this kind
        for i in 0..state.entries.len() {
            if state.entries[i].kind == kind {
                let alpha = selection_score(&state.entries[i], scorer, state.metric_mode)?;
                state
                    .scores
                    .insert(state.entries[i].layer_id.clone(), alpha);
            }
        }
        while state.mean_bits(kind) > target {
            let mut best: Option<(usize, f64)> = None;
            for (i, e) in state.entries.iter().enumerate() {
                if e.kind != kind || e.at_floor {
                    continue;
                }
                let alpha = state.scores[&e.layer_id];
                // strict > keeps the earliest index on ties
                if best.is_none_or(|(_, b)| alpha > b) {
                    best = Some((i, alpha));
                }
            }
            let Some((idx, alpha)) = best else {
                return Err(Error::Allocation(format!(
                    "all {kind:?} entries reached the floor of {BIT_FLOOR} bits before the \
                     mean reached {target}"
                )));
            };
            step += 1;
            state.entries[idx].current_bits -= 1;
            if state.entries[idx].current_bits <= BIT_FLOOR {
                state.entries[idx].at_floor = true;
            }
            let new_alpha = selection_score(&state.entries[idx], scorer, state.metric_mode)?;
            let id = state.entries[idx].layer_id.clone();
            state.scores.insert(id.clone(), new_alpha);
            trace.push(TraceStep {
                step,
                layer_id: id,
                new_bits: state.entries[idx].current_bits,
                alpha,
            });
        }
    }
    Ok(trace)
}

/// Serialized allocation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub metric_mode: MetricMode,
    pub order: AllocOrder,
    pub target_weight_bits: f64,
    pub target_act_bits: f64,
    pub entries: Vec<PlanEntry>,
    pub trace: Vec<TraceStep>,
}

/// Final bits of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer_id: String,
    pub kind: SiteKind,
    pub bits: u8,
}

impl AllocationPlan {
    pub fn from_state(state: &AllocationState, trace: Vec<TraceStep>) -> Self {
        AllocationPlan {
            metric_mode: state.metric_mode,
            order: state.order,
            target_weight_bits: state.target_weight_bits,
            target_act_bits: state.target_act_bits,
            entries: state
                .entries
                .iter()
                .map(|e| PlanEntry {
                    layer_id: e.layer_id.clone(),
                    kind: e.kind,
                    bits: e.current_bits,
                })
                .collect(),
            trace,
        }
    }

    pub fn bits_for(&self, layer_id: &str) -> Option<u8> {
        self.entries
            .iter()
            .find(|e| e.layer_id == layer_id)
            .map(|e| e.bits)
    }
}
