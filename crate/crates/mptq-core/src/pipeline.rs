//! End-to-end orchestration: calibration, redistribution, quantizer
//! fitting, bit-width allocation, applying the quantizers, and the
//! evaluation report.
//!
//! The composition order is fixed: redistribute the floating-point model
//! first (when configured), re-calibrate on the rewritten model, fit the
//! quantizers on the fresh taps, then run the greedy allocator (mp mode) or
//! assign uniform bits (sp mode), bake the weight quantization into the
//! model, and attach activation quantizers for inference.

use crate::alloc::{
    greedy_allocate, AllocOrder, AllocationPlan, AllocationState, BitScorer, LayerEntry,
    MetricMode, TensorScorer, REGION_MIN_BITS,
};
use crate::calibrate::{run_calibration, CalibrationCache};
use crate::container;
use crate::error::{Error, Result};
use crate::floats::Db;
use crate::gelu_quant::{region_clamping_loss, region_fake_quantize, RegionQuantizer};
use crate::model::{ActClass, SiteKind, SiteVisitor, ToyViT};
use crate::quant::{clamping_loss, fake_quantize, minmax_scale, sqnr_db, QuantSpec};
use crate::redistribute::{fuse_model, RedistParams, Strategy};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Single-precision (one bit-width everywhere) or mixed-precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sp,
    Mp,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(Mode::Sp),
            "mp" => Ok(Mode::Mp),
            other => Err(Error::Input(format!("unknown mode '{other}'"))),
        }
    }
}

fn default_sample_count() -> usize {
    32
}
fn default_bits() -> u8 {
    8
}
fn default_target() -> f64 {
    5.0
}
fn default_true() -> bool {
    true
}
fn default_strategy() -> Strategy {
    Strategy::None
}
fn default_metric_mode() -> MetricMode {
    MetricMode::SqnrTimesLogNumel
}
fn default_order() -> AllocOrder {
    AllocOrder::WeightsFirst
}

/// Everything a pipeline run needs beyond the model and data tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub model_path: Option<String>,
    #[serde(default)]
    pub data_path: Option<String>,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    pub mode: Mode,
    /// Quantize post-Softmax and post-LayerNorm outputs too.
    #[serde(default = "default_true")]
    pub fully_quantized: bool,
    /// Uniform bit-width for sp mode.
    #[serde(default = "default_bits")]
    pub bits: u8,
    /// Mean bit-width targets for mp mode.
    #[serde(default = "default_target")]
    pub weight_bits: f64,
    #[serde(default = "default_target")]
    pub act_bits: f64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_metric_mode")]
    pub metric_mode: MetricMode,
    #[serde(default = "default_order")]
    pub order: AllocOrder,
    #[serde(default)]
    pub element_weighted: bool,
    /// Also redistribute the final LayerNorm -> classifier pair.
    #[serde(default = "default_true")]
    pub redistribute_classifier: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub report_path: Option<String>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count < 1 {
            return Err(Error::Input("sample_count must be at least 1".into()));
        }
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Input(format!(
                "bits must be in [2,8], got {}",
                self.bits
            )));
        }
        for (name, v) in [
            ("weight_bits", self.weight_bits),
            ("act_bits", self.act_bits),
        ] {
            if !(2.0..=8.0).contains(&v) {
                return Err(Error::Input(format!("{name} must be in [2,8], got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model_path: None,
            data_path: None,
            sample_count: default_sample_count(),
            mode: Mode::Sp,
            fully_quantized: true,
            bits: default_bits(),
            weight_bits: default_target(),
            act_bits: default_target(),
            strategy: default_strategy(),
            metric_mode: default_metric_mode(),
            order: default_order(),
            element_weighted: false,
            redistribute_classifier: true,
            seed: 0,
            report_path: None,
        }
    }
}

/// The quantizer attached to one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SiteQuantizer {
    Uniform { bits: u8, scale: f32 },
    Region(RegionQuantizer),
}

impl SiteQuantizer {
    pub fn bits(&self) -> u8 {
        match self {
            SiteQuantizer::Uniform { bits, .. } => *bits,
            SiteQuantizer::Region(rq) => rq.bits,
        }
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        match self {
            SiteQuantizer::Uniform { bits, scale } => {
                fake_quantize(t, QuantSpec::new(*bits, *scale)?)
            }
            SiteQuantizer::Region(rq) => region_fake_quantize(t, rq),
        }
    }
}

/// A model with weight quantization baked in plus static activation
/// quantizers applied at each site during the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: ToyViT,
    pub act_quantizers: BTreeMap<String, SiteQuantizer>,
}

struct QuantApplyVisitor<'a> {
    map: &'a BTreeMap<String, SiteQuantizer>,
}

impl SiteVisitor for QuantApplyVisitor<'_> {
    fn visit(&mut self, site: &str, tensor: Tensor) -> Result<Tensor> {
        match self.map.get(site) {
            Some(q) => q.apply(&tensor),
            None => Ok(tensor),
        }
    }
}

impl QuantizedModel {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut visitor = QuantApplyVisitor {
            map: &self.act_quantizers,
        };
        self.model.forward_with_visitor(x, &mut visitor)
    }
}

/// Build allocator entries and the scorer from a calibration cache. Weight
/// entries point at the (possibly fused) model weights, activation entries
/// at the cached taps.
pub fn build_entries(
    model: &ToyViT,
    cache: &CalibrationCache,
) -> Result<(Vec<LayerEntry>, TensorScorer)> {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    let mut gelu_stats = BTreeMap::new();
    for info in &cache.sites {
        let index = tensors.len();
        match info.kind {
            SiteKind::Weight => {
                let w = model
                    .weight_tensor(&info.id)
                    .ok_or_else(|| Error::UnknownSite(info.id.clone()))?;
                tensors.push(w.clone());
                entries.push(LayerEntry::new(
                    info.id.clone(),
                    SiteKind::Weight,
                    None,
                    w.numel(),
                    index,
                ));
            }
            SiteKind::Activation => {
                let tap = cache
                    .taps
                    .get(&info.id)
                    .ok_or_else(|| Error::UnknownSite(info.id.clone()))?;
                tensors.push(tap.clone());
                if info.class == Some(ActClass::PostGelu) {
                    gelu_stats.insert(index, cache.gelu_stats[&info.id]);
                }
                entries.push(LayerEntry::new(
                    info.id.clone(),
                    SiteKind::Activation,
                    info.class,
                    cache.site_numel[&info.id],
                    index,
                ));
            }
        }
    }
    Ok((entries, TensorScorer::new(tensors, gelu_stats)))
}

/// Materialize the allocation: weights are fake-quantized in place at their
/// allotted bits, activation sites get static quantizers fitted on the
/// calibration taps. Post-GeLU sites use the region quantizer at 4 bits and
/// above, the uniform quantizer below.
pub fn apply_allocation(
    model: &ToyViT,
    entries: &[LayerEntry],
    scorer: &TensorScorer,
) -> Result<QuantizedModel> {
    let mut baked = model.clone();
    let mut act_quantizers = BTreeMap::new();
    for entry in entries {
        match entry.kind {
            SiteKind::Weight => {
                let reconstructed = scorer.reconstruct(entry, entry.current_bits)?;
                baked.set_weight_tensor(&entry.layer_id, reconstructed)?;
            }
            SiteKind::Activation => {
                let quantizer = if entry.class == Some(ActClass::PostGelu)
                    && entry.current_bits >= REGION_MIN_BITS
                {
                    SiteQuantizer::Region(
                        scorer.region_quantizer(entry.tensor_index, entry.current_bits)?,
                    )
                } else {
                    let spec = minmax_scale(scorer.tensor(entry.tensor_index), entry.current_bits)?;
                    SiteQuantizer::Uniform {
                        bits: spec.bits,
                        scale: spec.scale,
                    }
                };
                act_quantizers.insert(entry.layer_id.clone(), quantizer);
            }
        }
    }
    Ok(QuantizedModel {
        model: baked,
        act_quantizers,
    })
}

/// Set entry bit-widths from a saved plan. Every entry must appear in the
/// plan and vice versa.
pub fn apply_plan(entries: &mut [LayerEntry], plan: &AllocationPlan) -> Result<()> {
    if entries.len() != plan.entries.len() {
        return Err(Error::Allocation(format!(
            "plan covers {} sites, model has {}",
            plan.entries.len(),
            entries.len()
        )));
    }
    for entry in entries.iter_mut() {
        let bits = plan.bits_for(&entry.layer_id).ok_or_else(|| {
            Error::Allocation(format!("plan has no entry for {}", entry.layer_id))
        })?;
        entry.current_bits = bits;
    }
    Ok(())
}

/// Quantize a model according to a previously saved plan: calibrate, fit,
/// and apply the plan's bit-widths without re-running the greedy search.
/// The model must already carry any redistribution the plan was made for.
pub fn run_with_plan(
    model: &ToyViT,
    data: &Tensor,
    config: &PipelineConfig,
    plan: &AllocationPlan,
) -> Result<RunOutput> {
    config.validate().map_err(|e| Error::stage("config", e))?;
    let cache = run_calibration(
        model,
        data,
        config.sample_count,
        config.seed,
        config.fully_quantized,
    )
    .map_err(|e| Error::stage("calibrate", e))?;
    let (mut entries, scorer) = build_entries(model, &cache).map_err(|e| Error::stage("fit", e))?;
    apply_plan(&mut entries, plan).map_err(|e| Error::stage("apply", e))?;
    let quantized =
        apply_allocation(model, &entries, &scorer).map_err(|e| Error::stage("apply", e))?;
    let report = evaluate(model, &quantized, &entries, &scorer, data, config)
        .map_err(|e| Error::stage("evaluate", e))?;
    Ok(RunOutput {
        quantized,
        report,
        plan: Some(plan.clone()),
        redistribution: BTreeMap::new(),
    })
}

/// Per-run evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub fully_quantized: bool,
    pub strategy: Strategy,
    pub metric_mode: MetricMode,
    pub seed: u64,
    pub sample_count: usize,
    pub target_weight_bits: f64,
    pub target_act_bits: f64,
    pub mean_weight_bits: f64,
    pub mean_act_bits: f64,
    pub per_layer_bits: BTreeMap<String, u8>,
    pub per_layer_sqnr_db: BTreeMap<String, Db>,
    pub end_to_end_sqnr_db: Db,
    pub clamping: ClampingSummary,
    /// Final bit-width histogram over all quantized sites.
    pub bit_histogram: BTreeMap<u8, usize>,
    /// Histogram split by block ("stem" and "head" cover the model-level
    /// sites around the encoder stack).
    pub per_block_bits: BTreeMap<String, BTreeMap<u8, usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClampingSummary {
    pub total: f64,
    pub per_site: BTreeMap<String, f64>,
}

fn block_label(site: &str) -> String {
    site.strip_prefix("blocks.")
        .and_then(|rest| rest.split_once('.'))
        .map(|(idx, _)| format!("block.{idx}"))
        .unwrap_or_else(|| {
            if site.starts_with("classifier") {
                "head".to_string()
            } else {
                "stem".to_string()
            }
        })
}

/// Evaluate a quantized model against its floating-point source on a batch
/// of inputs, and summarize the allocation.
pub fn evaluate(
    fp_model: &ToyViT,
    quantized: &QuantizedModel,
    entries: &[LayerEntry],
    scorer: &TensorScorer,
    eval_inputs: &Tensor,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let fp_logits = fp_model.forward(eval_inputs)?;
    let q_logits = quantized.forward(eval_inputs)?;
    let end_to_end = sqnr_db(&fp_logits, &q_logits)?;

    let mut per_layer_bits = BTreeMap::new();
    let mut per_layer_sqnr = BTreeMap::new();
    let mut clamp_sites = BTreeMap::new();
    let mut clamp_total = 0.0f64;
    let mut histogram: BTreeMap<u8, usize> = BTreeMap::new();
    let mut per_block: BTreeMap<String, BTreeMap<u8, usize>> = BTreeMap::new();
    for entry in entries {
        per_layer_bits.insert(entry.layer_id.clone(), entry.current_bits);
        per_layer_sqnr.insert(
            entry.layer_id.clone(),
            Db(scorer.sqnr_at(entry, entry.current_bits)?),
        );
        *histogram.entry(entry.current_bits).or_default() += 1;
        *per_block
            .entry(block_label(&entry.layer_id))
            .or_default()
            .entry(entry.current_bits)
            .or_default() += 1;
        let tensor = scorer.tensor(entry.tensor_index);
        let loss = match entry.kind {
            SiteKind::Activation => match quantized.act_quantizers.get(&entry.layer_id) {
                Some(SiteQuantizer::Region(rq)) => region_clamping_loss(tensor, rq),
                Some(SiteQuantizer::Uniform { bits, scale }) => {
                    clamping_loss(tensor, QuantSpec::new(*bits, *scale)?)
                }
                None => 0.0,
            },
            SiteKind::Weight => clamping_loss(tensor, minmax_scale(tensor, entry.current_bits)?),
        };
        clamp_total += loss;
        clamp_sites.insert(entry.layer_id.clone(), loss);
    }
    let mean = |kind: SiteKind| -> f64 {
        let of_kind: Vec<&LayerEntry> = entries.iter().filter(|e| e.kind == kind).collect();
        if of_kind.is_empty() {
            0.0
        } else {
            of_kind.iter().map(|e| e.current_bits as f64).sum::<f64>() / of_kind.len() as f64
        }
    };
    Ok(EvalReport {
        mode: config.mode,
        fully_quantized: config.fully_quantized,
        strategy: config.strategy,
        metric_mode: config.metric_mode,
        seed: config.seed,
        sample_count: config.sample_count,
        target_weight_bits: config.weight_bits,
        target_act_bits: config.act_bits,
        mean_weight_bits: mean(SiteKind::Weight),
        mean_act_bits: mean(SiteKind::Activation),
        per_layer_bits,
        per_layer_sqnr_db: per_layer_sqnr,
        end_to_end_sqnr_db: Db(end_to_end),
        clamping: ClampingSummary {
            total: clamp_total,
            per_site: clamp_sites,
        },
        bit_histogram: histogram,
        per_block_bits: per_block,
    })
}

/// Everything a full pipeline run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub quantized: QuantizedModel,
    pub report: EvalReport,
    pub plan: Option<AllocationPlan>,
    pub redistribution: BTreeMap<String, RedistParams>,
}

/// The full composition: redistribute, re-calibrate, fit, allocate (or
/// assign uniform bits), apply, evaluate.
pub fn run_mptq(model: &ToyViT, data: &Tensor, config: &PipelineConfig) -> Result<RunOutput> {
    fn stage(name: &'static str) -> impl Fn(Error) -> Error {
        move |e| Error::stage(name, e)
    }
    config.validate().map_err(stage("config"))?;

    let cache = run_calibration(
        model,
        data,
        config.sample_count,
        config.seed,
        config.fully_quantized,
    )
    .map_err(stage("calibrate"))?;

    let osup_bits = effective_act_bits(config);
    let (working_model, redistribution) = fuse_model(
        model,
        config.strategy,
        &cache.taps,
        osup_bits,
        config.redistribute_classifier,
    )
    .map_err(stage("redistribute"))?;

    let cache = if config.strategy == Strategy::None {
        cache
    } else {
        run_calibration(
            &working_model,
            data,
            config.sample_count,
            config.seed,
            config.fully_quantized,
        )
        .map_err(stage("recalibrate"))?
    };

    let (mut entries, scorer) = build_entries(&working_model, &cache).map_err(stage("fit"))?;

    let plan = match config.mode {
        Mode::Sp => {
            for e in &mut entries {
                e.current_bits = config.bits;
            }
            None
        }
        Mode::Mp => {
            let mut state = AllocationState::new(
                entries,
                config.weight_bits,
                config.act_bits,
                config.metric_mode,
            );
            state.order = config.order;
            state.element_weighted = config.element_weighted;
            let trace = greedy_allocate(&mut state, &scorer).map_err(stage("allocate"))?;
            let plan = AllocationPlan::from_state(&state, trace);
            entries = state.entries;
            Some(plan)
        }
    };

    let quantized = apply_allocation(&working_model, &entries, &scorer).map_err(stage("apply"))?;
    let report =
        evaluate(model, &quantized, &entries, &scorer, data, config).map_err(stage("evaluate"))?;
    Ok(RunOutput {
        quantized,
        report,
        plan,
        redistribution,
    })
}

fn effective_act_bits(config: &PipelineConfig) -> u8 {
    match config.mode {
        Mode::Sp => config.bits,
        Mode::Mp => (config.act_bits.round() as i64).clamp(2, 8) as u8,
    }
}

/// Run only as far as the allocation plan.
pub fn run_allocation(
    model: &ToyViT,
    data: &Tensor,
    config: &PipelineConfig,
) -> Result<AllocationPlan> {
    config.validate().map_err(|e| Error::stage("config", e))?;
    let cache = run_calibration(
        model,
        data,
        config.sample_count,
        config.seed,
        config.fully_quantized,
    )
    .map_err(|e| Error::stage("calibrate", e))?;
    let (working_model, _) = fuse_model(
        model,
        config.strategy,
        &cache.taps,
        effective_act_bits(config),
        config.redistribute_classifier,
    )
    .map_err(|e| Error::stage("redistribute", e))?;
    let cache = if config.strategy == Strategy::None {
        cache
    } else {
        run_calibration(
            &working_model,
            data,
            config.sample_count,
            config.seed,
            config.fully_quantized,
        )
        .map_err(|e| Error::stage("recalibrate", e))?
    };
    let (entries, scorer) =
        build_entries(&working_model, &cache).map_err(|e| Error::stage("fit", e))?;
    let mut state = AllocationState::new(
        entries,
        config.weight_bits,
        config.act_bits,
        config.metric_mode,
    );
    state.order = config.order;
    state.element_weighted = config.element_weighted;
    let trace = greedy_allocate(&mut state, &scorer).map_err(|e| Error::stage("allocate", e))?;
    Ok(AllocationPlan::from_state(&state, trace))
}

/// Save a model's parameters as a container file.
pub fn save_model(path: impl AsRef<Path>, model: &ToyViT) -> Result<()> {
    let map: BTreeMap<String, Tensor> = model.named_tensors().into_iter().collect();
    container::save_f32(path, &map)
}

/// Load a model from a container file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ToyViT> {
    let map = container::load_f32(&path)
        .map_err(|e| Error::stage("load", format!("{}: {e}", path.as_ref().display())))?;
    ToyViT::from_named_tensors(&map)
}

/// Save a data pool under the tensor name `samples`.
pub fn save_data(path: impl AsRef<Path>, data: &Tensor) -> Result<()> {
    let mut map = BTreeMap::new();
    map.insert("samples".to_string(), data.clone());
    container::save_f32(path, &map)
}

/// Load a `(samples, tokens, embed)` pool.
pub fn load_data(path: impl AsRef<Path>) -> Result<Tensor> {
    let map = container::load_f32(&path)
        .map_err(|e| Error::stage("load", format!("{}: {e}", path.as_ref().display())))?;
    map.get("samples")
        .cloned()
        .ok_or_else(|| Error::Container("data file has no 'samples' tensor".into()))
}

/// Save a quantized model: the baked parameters go into the container, the
/// activation quantizer table into `<path>.quant.json`.
pub fn save_quantized_model(path: impl AsRef<Path>, q: &QuantizedModel) -> Result<()> {
    save_model(&path, &q.model)?;
    let side = sidecar_path(&path);
    let json = serde_json::to_vec_pretty(&q.act_quantizers)?;
    std::fs::write(side, json)?;
    Ok(())
}

/// Load a quantized model saved by [`save_quantized_model`].
pub fn load_quantized_model(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let model = load_model(&path)?;
    let side = sidecar_path(&path);
    let bytes = std::fs::read(&side)
        .map_err(|e| Error::stage("load", format!("{}: {e}", side.display())))?;
    let act_quantizers = serde_json::from_slice(&bytes)?;
    Ok(QuantizedModel {
        model,
        act_quantizers,
    })
}

fn sidecar_path(path: impl AsRef<Path>) -> std::path::PathBuf {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".quant.json");
    std::path::PathBuf::from(p)
}

/// Write a report as pretty JSON.
pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(path, json)?;
    Ok(())
}

/// Read a report back.
pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Set the global rayon thread cap from `MPTQ_THREADS`, if present. Returns
/// the applied cap. Calling it more than once is harmless.
pub fn init_thread_cap_from_env() -> Option<usize> {
    let n: usize = std::env::var("MPTQ_THREADS").ok()?.parse().ok()?;
    if n == 0 {
        return None;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Some(n)
}
