//! Calibration: run a small sample set through the model and record every
//! quantizable activation, the post-GeLU distribution bounds, and
//! per-channel statistics at post-LayerNorm sites.

use crate::error::{Error, Result};
use crate::gelu_quant::{percentile, GeluStats};
use crate::model::{ActClass, SiteInfo, SiteKind, ToyViT};
use crate::redistribute::concat_rows;
use crate::tensor::Tensor;
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-channel summary of a post-LayerNorm activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    pub abs_max: Vec<f32>,
}

impl ChannelStats {
    fn from_tap(tap: &Tensor) -> Self {
        let c = tap.last_dim();
        let rows = tap.numel() / c;
        let mut mean = vec![0.0f64; c];
        let mut min = vec![f32::INFINITY; c];
        let mut max = vec![f32::NEG_INFINITY; c];
        for row in tap.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let mean: Vec<f32> = mean.iter().map(|m| (m / rows as f64) as f32).collect();
        let abs_max = min
            .iter()
            .zip(&max)
            .map(|(&a, &b)| a.abs().max(b.abs()))
            .collect();
        ChannelStats {
            mean,
            min,
            max,
            abs_max,
        }
    }
}

/// Everything the fitting and allocation stages need from the calibration
/// forward passes. Taps are concatenated over samples into `(rows, width)`
/// tensors; `site_numel` keeps the per-sample activation sizes so selection
/// scores do not depend on how many samples were used.
#[derive(Debug, Clone)]
pub struct CalibrationCache {
    pub sites: Vec<SiteInfo>,
    pub taps: BTreeMap<String, Tensor>,
    pub site_numel: BTreeMap<String, usize>,
    pub gelu_stats: BTreeMap<String, GeluStats>,
    pub channel_stats: BTreeMap<String, ChannelStats>,
    pub sample_count: usize,
}

/// Pull one `(tokens, embed)` sample out of a `(samples, tokens, embed)`
/// pool as a single-element batch.
pub fn sample_slice(data: &Tensor, index: usize) -> Result<Tensor> {
    if data.rank() != 3 {
        return Err(Error::Dimension(format!(
            "expected a (samples, tokens, embed) pool, got {:?}",
            data.shape()
        )));
    }
    let (n, t, e) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    if index >= n {
        return Err(Error::Input(format!("sample {index} out of {n}")));
    }
    let start = index * t * e;
    Tensor::new(vec![1, t, e], data.data()[start..start + t * e].to_vec())
}

/// Select `sample_count` pool indices without replacement, seeded.
pub fn select_samples(pool: usize, sample_count: usize, seed: u64) -> Result<Vec<usize>> {
    if sample_count == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    if pool < sample_count {
        return Err(Error::Input(format!(
            "calibration pool holds {pool} samples, need {sample_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_CA11);
    let mut chosen = index_sample(&mut rng, pool, sample_count).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Forward the selected samples with all activation sites tapped and fold
/// the taps into a [`CalibrationCache`]. The `fully_quantized` flag only
/// affects the cached site list; taps always cover every site so the
/// redistribution stage can read post-LayerNorm activations in either mode.
pub fn run_calibration(
    model: &ToyViT,
    data: &Tensor,
    sample_count: usize,
    seed: u64,
    fully_quantized: bool,
) -> Result<CalibrationCache> {
    let chosen = select_samples(data.shape()[0], sample_count, seed)?;
    let act_sites: Vec<String> = model
        .quantizable_sites(true)
        .into_iter()
        .filter(|s| s.kind == SiteKind::Activation)
        .map(|s| s.id)
        .collect();
    let mut parts: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let mut gelu_minima: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &i in &chosen {
        let sample = sample_slice(data, i)?;
        let (_, taps) = model.forward_with_taps(&sample, &act_sites)?;
        for (site, tap) in taps {
            if site.ends_with("fc2.input") {
                let min = tap
                    .data()
                    .iter()
                    .fold(f64::INFINITY, |m, &v| m.min(v as f64));
                gelu_minima.entry(site.clone()).or_default().push(min);
            }
            parts.entry(site).or_default().push(tap);
        }
    }
    let mut taps = BTreeMap::new();
    let mut site_numel = BTreeMap::new();
    for (site, tensors) in parts {
        site_numel.insert(site.clone(), tensors[0].numel());
        taps.insert(site, concat_rows(&tensors)?);
    }
    let sites = model.quantizable_sites(fully_quantized);
    let mut gelu_stats = BTreeMap::new();
    let mut channel_stats = BTreeMap::new();
    for info in &sites {
        match info.class {
            Some(ActClass::PostGelu) => {
                let tap = &taps[&info.id];
                let minima = &gelu_minima[&info.id];
                let x_low = minima.iter().sum::<f64>() / minima.len() as f64;
                let mut pooled: Vec<f64> = tap.data().iter().map(|&v| v as f64).collect();
                pooled.sort_by(|a, b| a.total_cmp(b));
                let x_up = percentile(&pooled, 99.95);
                gelu_stats.insert(info.id.clone(), GeluStats::new(x_low, x_up)?);
            }
            Some(ActClass::PostLayerNorm) => {
                channel_stats.insert(info.id.clone(), ChannelStats::from_tap(&taps[&info.id]));
            }
            _ => {}
        }
    }
    Ok(CalibrationCache {
        sites,
        taps,
        site_numel,
        gelu_stats,
        channel_stats,
        sample_count,
    })
}

/// Serializable digest of a cache for the `calibrate` subcommand.
#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub sample_count: usize,
    pub sites: Vec<SiteSummary>,
    pub gelu_stats: BTreeMap<String, GeluStats>,
    pub channel_stats: BTreeMap<String, ChannelStats>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SiteSummary {
    pub id: String,
    pub kind: SiteKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<ActClass>,
    pub numel: usize,
}

impl CalibrationSummary {
    pub fn from_cache(cache: &CalibrationCache, model: &ToyViT) -> Self {
        CalibrationSummary {
            sample_count: cache.sample_count,
            sites: cache
                .sites
                .iter()
                .map(|s| SiteSummary {
                    id: s.id.clone(),
                    kind: s.kind,
                    class: s.class,
                    numel: match s.kind {
                        SiteKind::Weight => {
                            model.weight_tensor(&s.id).map(|t| t.numel()).unwrap_or(0)
                        }
                        SiteKind::Activation => cache.site_numel[&s.id],
                    },
                })
                .collect(),
            gelu_stats: cache.gelu_stats.clone(),
            channel_stats: cache.channel_stats.clone(),
        }
    }
}
