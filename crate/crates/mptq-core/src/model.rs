//! A small deterministic pre-LN transformer encoder and its quantizable-site
//! machinery.
//!
//! Every place a tensor can be fake-quantized (matmul inputs and weights,
//! post-Softmax and post-LayerNorm outputs) is a named *site*. The forward
//! pass routes each site's tensor through a [`SiteVisitor`], which is how
//! calibration taps and quantized inference are implemented without forking
//! the forward code.

use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm, linear, matmul, softmax, transpose_last2, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f32 = 1e-6;

/// A dense layer `x . W^T + b`, weight shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl LinearLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-channel LayerNorm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// One pre-LN encoder block: attention then MLP, both with residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub qkv: LinearLayer,
    pub proj: LinearLayer,
    pub ln2: LayerNormParams,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub num_heads: usize,
}

impl EncoderBlock {
    fn validate(&self, embed: usize) -> Result<()> {
        if self.qkv.out_dim() != 3 * embed {
            return Err(Error::Dimension(format!(
                "qkv out dim {} != 3 * embed {}",
                self.qkv.out_dim(),
                embed
            )));
        }
        if self.fc1.out_dim() != self.fc2.in_dim() {
            return Err(Error::Dimension(format!(
                "fc1 out {} != fc2 in {}",
                self.fc1.out_dim(),
                self.fc2.in_dim()
            )));
        }
        for (name, ln) in [("ln1", &self.ln1), ("ln2", &self.ln2)] {
            if ln.gamma.len() != embed || ln.beta.len() != embed {
                return Err(Error::Dimension(format!(
                    "{name} params do not match embed {embed}"
                )));
            }
        }
        if self.num_heads == 0 || !embed.is_multiple_of(self.num_heads) {
            return Err(Error::Dimension(format!(
                "embed {embed} not divisible into {} heads",
                self.num_heads
            )));
        }
        Ok(())
    }
}

/// Model dimensions for the seeded generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub embed: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub ff: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: 32,
            depth: 4,
            num_heads: 4,
            ff: 64,
            classes: 10,
        }
    }
}

/// Patch embedding, a stack of encoder blocks, a final LayerNorm, mean
/// pooling over tokens, and a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyViT {
    pub patch_embed: LinearLayer,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNormParams,
    pub classifier: LinearLayer,
    pub embed: usize,
}

/// Whether a site holds a weight or an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Weight,
    Activation,
}

/// What kind of activation flows through a site; decides both quantizer
/// choice (post-GeLU gets the region quantizer) and whether the site is
/// skipped when Softmax/LayerNorm are kept in floating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActClass {
    PostLayerNorm,
    PostSoftmax,
    PostGelu,
    Generic,
}

/// A quantizable site: id, kind, and activation class for activations.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteInfo {
    pub id: String,
    pub kind: SiteKind,
    pub class: Option<ActClass>,
}

impl SiteInfo {
    fn weight(id: String) -> Self {
        SiteInfo {
            id,
            kind: SiteKind::Weight,
            class: None,
        }
    }

    fn act(id: String, class: ActClass) -> Self {
        SiteInfo {
            id,
            kind: SiteKind::Activation,
            class: Some(class),
        }
    }
}

/// Observes or rewrites the tensor flowing through each named site.
pub trait SiteVisitor {
    fn visit(&mut self, site: &str, tensor: Tensor) -> Result<Tensor>;
}

/// Forward untouched.
pub struct NoopVisitor;

impl SiteVisitor for NoopVisitor {
    fn visit(&mut self, _site: &str, tensor: Tensor) -> Result<Tensor> {
        Ok(tensor)
    }
}

/// Records clones of requested site tensors without altering the flow.
pub struct TapVisitor {
    wanted: std::collections::BTreeSet<String>,
    pub taps: BTreeMap<String, Tensor>,
}

impl TapVisitor {
    pub fn new(wanted: impl IntoIterator<Item = String>) -> Self {
        TapVisitor {
            wanted: wanted.into_iter().collect(),
            taps: BTreeMap::new(),
        }
    }
}

impl SiteVisitor for TapVisitor {
    fn visit(&mut self, site: &str, tensor: Tensor) -> Result<Tensor> {
        if self.wanted.contains(site) {
            self.taps.insert(site.to_string(), tensor.clone());
        }
        Ok(tensor)
    }
}

impl ToyViT {
    /// Deterministic model: weights are Gaussian scaled by `1/sqrt(fan_in)`;
    /// LayerNorm affines carry per-channel spread so post-LayerNorm
    /// activations exhibit the channel asymmetry the redistribution stage
    /// targets.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed;
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock {
                // mild channel spread before attention; sparse large
                // channel shifts before the MLP, so fc1 inputs carry the
                // asymmetry that redistribution targets
                ln1: seeded_ln(e, &mut rng, 0.3, 0.3),
                qkv: seeded_linear(3 * e, e, &mut rng),
                proj: seeded_linear(e, e, &mut rng),
                ln2: seeded_ln_outlier(e, &mut rng, 0.5),
                fc1: seeded_linear(config.ff, e, &mut rng),
                fc2: seeded_linear(e, config.ff, &mut rng),
                num_heads: config.num_heads,
            })
            .collect();
        let model = ToyViT {
            patch_embed: seeded_linear(e, e, &mut rng),
            blocks,
            final_ln: seeded_ln(e, &mut rng, 0.4, 0.5),
            classifier: seeded_linear(config.classes, e, &mut rng),
            embed: e,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn num_heads(&self) -> usize {
        self.blocks.first().map(|b| b.num_heads).unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_embed.in_dim() != self.embed || self.patch_embed.out_dim() != self.embed {
            return Err(Error::Dimension(
                "patch embed must map embed -> embed".into(),
            ));
        }
        for b in &self.blocks {
            b.validate(self.embed)?;
        }
        if self.final_ln.gamma.len() != self.embed || self.final_ln.beta.len() != self.embed {
            return Err(Error::Dimension(
                "final LayerNorm params do not match embed".into(),
            ));
        }
        if self.classifier.in_dim() != self.embed {
            return Err(Error::Dimension(
                "classifier input does not match embed".into(),
            ));
        }
        Ok(())
    }

    /// Quantizable sites in model order. With `fully_quantized` false,
    /// post-Softmax and post-LayerNorm activations stay in floating point
    /// and are not listed.
    pub fn quantizable_sites(&self, fully_quantized: bool) -> Vec<SiteInfo> {
        let mut sites = Vec::new();
        let push_act = |sites: &mut Vec<SiteInfo>, id: String, class: ActClass| {
            let skip = !fully_quantized
                && matches!(class, ActClass::PostLayerNorm | ActClass::PostSoftmax);
            if !skip {
                sites.push(SiteInfo::act(id, class));
            }
        };
        sites.push(SiteInfo::weight("patch_embed.weight".into()));
        push_act(&mut sites, "patch_embed.input".into(), ActClass::Generic);
        for i in 0..self.blocks.len() {
            let p = format!("blocks.{i}");
            sites.push(SiteInfo::weight(format!("{p}.qkv.weight")));
            push_act(
                &mut sites,
                format!("{p}.qkv.input"),
                ActClass::PostLayerNorm,
            );
            push_act(&mut sites, format!("{p}.attn.q"), ActClass::Generic);
            push_act(&mut sites, format!("{p}.attn.k"), ActClass::Generic);
            push_act(&mut sites, format!("{p}.attn.probs"), ActClass::PostSoftmax);
            push_act(&mut sites, format!("{p}.attn.v"), ActClass::Generic);
            sites.push(SiteInfo::weight(format!("{p}.proj.weight")));
            push_act(&mut sites, format!("{p}.proj.input"), ActClass::Generic);
            sites.push(SiteInfo::weight(format!("{p}.fc1.weight")));
            push_act(
                &mut sites,
                format!("{p}.fc1.input"),
                ActClass::PostLayerNorm,
            );
            sites.push(SiteInfo::weight(format!("{p}.fc2.weight")));
            push_act(&mut sites, format!("{p}.fc2.input"), ActClass::PostGelu);
        }
        sites.push(SiteInfo::weight("classifier.weight".into()));
        push_act(
            &mut sites,
            "classifier.input".into(),
            ActClass::PostLayerNorm,
        );
        sites
    }

    /// Every site id the forward pass can visit, taps included.
    pub fn all_site_ids(&self) -> Vec<String> {
        self.quantizable_sites(true)
            .into_iter()
            .map(|s| s.id)
            .collect()
    }

    /// Plain forward: `(batch, tokens, embed)` in, `(batch, classes)` out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_visitor(x, &mut NoopVisitor)
    }

    /// Forward that records the requested site tensors. Logits are bitwise
    /// identical to the untapped forward; unknown ids fail up front.
    pub fn forward_with_taps(
        &self,
        x: &Tensor,
        tap_ids: &[String],
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let known: std::collections::BTreeSet<String> = self.all_site_ids().into_iter().collect();
        for id in tap_ids {
            if !known.contains(id) {
                return Err(Error::UnknownSite(id.clone()));
            }
        }
        let mut visitor = TapVisitor::new(tap_ids.iter().cloned());
        let logits = self.forward_with_visitor(x, &mut visitor)?;
        Ok((logits, visitor.taps))
    }

    /// Forward through an arbitrary site visitor.
    pub fn forward_with_visitor(&self, x: &Tensor, v: &mut impl SiteVisitor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[2] != self.embed {
            return Err(Error::Dimension(format!(
                "expected input (batch, tokens, {}), got {:?}",
                self.embed,
                x.shape()
            )));
        }
        let w = v.visit("patch_embed.weight", self.patch_embed.weight.clone())?;
        let xin = v.visit("patch_embed.input", x.clone())?;
        let mut h = linear(&xin, &w, &self.patch_embed.bias)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = block_forward(blk, i, &h, v)?;
        }
        let ln = layer_norm(&h, &self.final_ln.gamma, &self.final_ln.beta, LN_EPS)?;
        let pooled = mean_pool_tokens(&ln)?;
        let w = v.visit("classifier.weight", self.classifier.weight.clone())?;
        let cin = v.visit("classifier.input", pooled)?;
        linear(&cin, &w, &self.classifier.bias)
    }

    /// The weight tensor behind a weight site id.
    pub fn weight_tensor(&self, site_id: &str) -> Option<&Tensor> {
        match site_id {
            "patch_embed.weight" => Some(&self.patch_embed.weight),
            "classifier.weight" => Some(&self.classifier.weight),
            _ => {
                let rest = site_id.strip_prefix("blocks.")?;
                let (idx, layer) = rest.split_once('.')?;
                let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
                match layer {
                    "qkv.weight" => Some(&block.qkv.weight),
                    "proj.weight" => Some(&block.proj.weight),
                    "fc1.weight" => Some(&block.fc1.weight),
                    "fc2.weight" => Some(&block.fc2.weight),
                    _ => None,
                }
            }
        }
    }

    /// Replace the weight behind a weight site id; shapes must match.
    pub fn set_weight_tensor(&mut self, site_id: &str, weight: Tensor) -> Result<()> {
        let slot = match site_id {
            "patch_embed.weight" => Some(&mut self.patch_embed.weight),
            "classifier.weight" => Some(&mut self.classifier.weight),
            _ => site_id
                .strip_prefix("blocks.")
                .and_then(|rest| rest.split_once('.'))
                .and_then(|(idx, layer)| {
                    let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
                    match layer {
                        "qkv.weight" => Some(&mut block.qkv.weight),
                        "proj.weight" => Some(&mut block.proj.weight),
                        "fc1.weight" => Some(&mut block.fc1.weight),
                        "fc2.weight" => Some(&mut block.fc2.weight),
                        _ => None,
                    }
                }),
        };
        let slot = slot.ok_or_else(|| Error::UnknownSite(site_id.to_string()))?;
        if slot.shape() != weight.shape() {
            return Err(Error::Dimension(format!(
                "weight for {site_id}: {:?} vs {:?}",
                slot.shape(),
                weight.shape()
            )));
        }
        *slot = weight;
        Ok(())
    }

    /// Shape-level structure: parameter names with shapes plus head counts.
    /// Equivalent-transform rewrites must leave this untouched.
    pub fn structure_signature(&self) -> Vec<(String, Vec<usize>)> {
        let mut sig: Vec<(String, Vec<usize>)> = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec()))
            .collect();
        sig.push(("num_heads".into(), vec![self.num_heads()]));
        sig
    }

    /// Parameters as named tensors, the container-file layout.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let ln_tensors = |prefix: &str, ln: &LayerNormParams| {
            vec![
                (
                    format!("{prefix}.gamma"),
                    Tensor::from_vec(ln.gamma.clone()),
                ),
                (format!("{prefix}.beta"), Tensor::from_vec(ln.beta.clone())),
            ]
        };
        let lin_tensors = |prefix: &str, l: &LinearLayer| {
            vec![
                (format!("{prefix}.weight"), l.weight.clone()),
                (format!("{prefix}.bias"), Tensor::from_vec(l.bias.clone())),
            ]
        };
        let mut out = Vec::new();
        out.extend(lin_tensors("patch_embed", &self.patch_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend(ln_tensors(&format!("{p}.ln1"), &b.ln1));
            out.extend(lin_tensors(&format!("{p}.qkv"), &b.qkv));
            out.extend(lin_tensors(&format!("{p}.proj"), &b.proj));
            out.extend(ln_tensors(&format!("{p}.ln2"), &b.ln2));
            out.extend(lin_tensors(&format!("{p}.fc1"), &b.fc1));
            out.extend(lin_tensors(&format!("{p}.fc2"), &b.fc2));
        }
        out.extend(ln_tensors("final_ln", &self.final_ln));
        out.extend(lin_tensors("classifier", &self.classifier));
        out.push((
            "meta.num_heads".into(),
            Tensor::from_vec(vec![self.num_heads() as f32]),
        ));
        out
    }

    /// Rebuild a model from named tensors.
    pub fn from_named_tensors(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            map.get(name)
                .ok_or_else(|| Error::Container(format!("missing tensor {name}")))
        };
        let lin = |prefix: &str| -> Result<LinearLayer> {
            Ok(LinearLayer {
                weight: get(&format!("{prefix}.weight"))?.clone(),
                bias: get(&format!("{prefix}.bias"))?.data().to_vec(),
            })
        };
        let ln = |prefix: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: get(&format!("{prefix}.gamma"))?.data().to_vec(),
                beta: get(&format!("{prefix}.beta"))?.data().to_vec(),
            })
        };
        let num_heads = get("meta.num_heads")?.data()[0] as usize;
        let mut depth = 0;
        while map.contains_key(&format!("blocks.{depth}.qkv.weight")) {
            depth += 1;
        }
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                Ok(EncoderBlock {
                    ln1: ln(&format!("{p}.ln1"))?,
                    qkv: lin(&format!("{p}.qkv"))?,
                    proj: lin(&format!("{p}.proj"))?,
                    ln2: ln(&format!("{p}.ln2"))?,
                    fc1: lin(&format!("{p}.fc1"))?,
                    fc2: lin(&format!("{p}.fc2"))?,
                    num_heads,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let patch_embed = lin("patch_embed")?;
        let embed = patch_embed.out_dim();
        let model = ToyViT {
            patch_embed,
            blocks,
            final_ln: ln("final_ln")?,
            classifier: lin("classifier")?,
            embed,
        };
        model.validate()?;
        Ok(model)
    }
}

fn gauss(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    (0..n)
        .map(|_| (normal.sample(rng) * scale) as f32)
        .collect()
}

fn seeded_linear(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> LinearLayer {
    let scale = 1.0 / (inp as f64).sqrt();
    LinearLayer {
        weight: Tensor::new(vec![out, inp], gauss(out * inp, scale, rng)).unwrap(),
        bias: gauss(out, 0.02, rng),
    }
}

fn seeded_ln(
    n: usize,
    rng: &mut ChaCha8Rng,
    gamma_spread: f64,
    beta_spread: f64,
) -> LayerNormParams {
    LayerNormParams {
        gamma: gauss(n, gamma_spread, rng)
            .iter()
            .map(|g| (1.0 + g).max(0.1))
            .collect(),
        beta: gauss(n, beta_spread, rng),
    }
}

/// LayerNorm affine whose shift is heavy-tailed: most channels sit near
/// zero, a sparse few carry large offsets, the channel-outlier pattern that
/// makes symmetric quantization of the following linear input hard.
fn seeded_ln_outlier(n: usize, rng: &mut ChaCha8Rng, gamma_spread: f64) -> LayerNormParams {
    use rand::Rng;
    let gamma = gauss(n, gamma_spread, rng)
        .iter()
        .map(|g| (1.0 + g).max(0.1))
        .collect();
    let beta = (0..n)
        .map(|_| {
            let spread = if rng.random_range(0.0..1.0) < 0.15 {
                3.0
            } else {
                0.2
            };
            (spread * rand_distr::Normal::new(0.0f64, 1.0).unwrap().sample(rng)) as f32
        })
        .collect();
    LayerNormParams { gamma, beta }
}

/// Mean over the token axis: `(batch, tokens, embed)` -> `(batch, embed)`.
fn mean_pool_tokens(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Dimension("mean pool expects rank 3".into()));
    }
    let (b, t, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0f32; b * e];
    for bi in 0..b {
        for ti in 0..t {
            for ei in 0..e {
                out[bi * e + ei] += x.data()[bi * t * e + ti * e + ei] / t as f32;
            }
        }
    }
    Tensor::new(vec![b, e], out)
}

/// `(batch, tokens, 3 * embed)` -> per-head `q`, `k`, `v`, each
/// `(batch, heads, tokens, head_dim)`.
fn split_qkv(qkv: &Tensor, heads: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, three_e) = (qkv.shape()[0], qkv.shape()[1], qkv.shape()[2]);
    let e = three_e / 3;
    let hd = e / heads;
    let mut parts = vec![vec![0.0f32; b * heads * t * hd]; 3];
    for bi in 0..b {
        for ti in 0..t {
            let row = &qkv.data()[(bi * t + ti) * three_e..(bi * t + ti + 1) * three_e];
            for (part, buf) in parts.iter_mut().enumerate() {
                for h in 0..heads {
                    for d in 0..hd {
                        let dst = ((bi * heads + h) * t + ti) * hd + d;
                        buf[dst] = row[part * e + h * hd + d];
                    }
                }
            }
        }
    }
    let shape = vec![b, heads, t, hd];
    let v = parts.pop().unwrap();
    let k = parts.pop().unwrap();
    let q = parts.pop().unwrap();
    Ok((
        Tensor::new(shape.clone(), q)?,
        Tensor::new(shape.clone(), k)?,
        Tensor::new(shape, v)?,
    ))
}

/// `(batch, heads, tokens, head_dim)` -> `(batch, tokens, embed)`.
fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, heads, t, hd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let e = heads * hd;
    let mut out = vec![0.0f32; b * t * e];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                for d in 0..hd {
                    out[(bi * t + ti) * e + h * hd + d] =
                        x.data()[((bi * heads + h) * t + ti) * hd + d];
                }
            }
        }
    }
    Tensor::new(vec![b, t, e], out)
}

fn block_forward(
    blk: &EncoderBlock,
    idx: usize,
    x: &Tensor,
    v: &mut impl SiteVisitor,
) -> Result<Tensor> {
    let p = format!("blocks.{idx}");
    let ln1 = layer_norm(x, &blk.ln1.gamma, &blk.ln1.beta, LN_EPS)?;
    let qw = v.visit(&format!("{p}.qkv.weight"), blk.qkv.weight.clone())?;
    let qin = v.visit(&format!("{p}.qkv.input"), ln1)?;
    let qkv = linear(&qin, &qw, &blk.qkv.bias)?;
    let (q, k, vv) = split_qkv(&qkv, blk.num_heads)?;
    let q = v.visit(&format!("{p}.attn.q"), q)?;
    let k = v.visit(&format!("{p}.attn.k"), k)?;
    let hd = q.shape()[3];
    let scale = 1.0 / (hd as f32).sqrt();
    let scores = matmul(&q, &transpose_last2(&k)?)?.map(|s| s * scale);
    let probs = v.visit(&format!("{p}.attn.probs"), softmax(&scores))?;
    let vv = v.visit(&format!("{p}.attn.v"), vv)?;
    let ctx = merge_heads(&matmul(&probs, &vv)?)?;
    let pw = v.visit(&format!("{p}.proj.weight"), blk.proj.weight.clone())?;
    let pin = v.visit(&format!("{p}.proj.input"), ctx)?;
    let h = x.add(&linear(&pin, &pw, &blk.proj.bias)?)?;
    let ln2 = layer_norm(&h, &blk.ln2.gamma, &blk.ln2.beta, LN_EPS)?;
    let f1w = v.visit(&format!("{p}.fc1.weight"), blk.fc1.weight.clone())?;
    let f1in = v.visit(&format!("{p}.fc1.input"), ln2)?;
    let mid = gelu(&linear(&f1in, &f1w, &blk.fc1.bias)?);
    let f2w = v.visit(&format!("{p}.fc2.weight"), blk.fc2.weight.clone())?;
    let f2in = v.visit(&format!("{p}.fc2.input"), mid)?;
    h.add(&linear(&f2in, &f2w, &blk.fc2.bias)?)
}
