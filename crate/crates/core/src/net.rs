//! Two-stream segmentation network.
//!
//! Each phase runs through its own five-stage grouped-residual encoder.
//! After stages 2..=5 the two streams are fused (SAM, plain addition, or not
//! at all for the single-phase baseline); the fused maps feed a multi-level
//! decoder that predicts initial class probabilities, and the optional
//! refinement head produces the final ones.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Conv2dSpec;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::sam::{sam_forward, SamParams};
use crate::tensor::{Scalar, Tensor};
use crate::urim::{urim_refine, urim_refine_with_confidence, ConfidenceMap, UrimParams};

pub const STAGES: usize = 5;
/// Encoder stages whose outputs are fused and decoded (1-based 2..=5).
pub const FUSED_STAGES: usize = 4;
/// Total downsampling of the deepest stage.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    /// Single phase: the ART stream is never evaluated.
    #[serde(rename = "sp")]
    Sp,
    /// Elementwise sum of phase features, fed forward to both streams.
    #[serde(rename = "mp-add")]
    MpAdd,
    #[serde(rename = "sam")]
    Sam,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Sp => "sp",
            FusionMode::MpAdd => "mp-add",
            FusionMode::Sam => "sam",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(FusionMode::Sp),
            "mp-add" => Ok(FusionMode::MpAdd),
            "sam" => Ok(FusionMode::Sam),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub stage_widths: Vec<usize>,
    pub group_count: usize,
    pub fusion_mode: FusionMode,
    pub urim_enabled: bool,
    pub decision_width: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![8, 16, 32, 64, 128],
            group_count: 4,
            fusion_mode: FusionMode::Sam,
            urim_enabled: true,
            decision_width: 16,
            input_channels: 3,
        }
    }
}

impl NetworkConfig {
    /// Tiny configuration used by the gradient checks.
    pub fn micro() -> Self {
        Self { stage_widths: vec![2, 2, 4, 4, 4], decision_width: 4, ..Self::default() }
    }

    pub fn with_mode(mut self, mode: FusionMode, urim: bool) -> Self {
        self.fusion_mode = mode;
        self.urim_enabled = urim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != STAGES {
            return Err(Error::InvalidArgument(format!(
                "stage_widths needs {STAGES} entries, got {}",
                self.stage_widths.len()
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.decision_width == 0 || self.input_channels == 0 {
            return Err(Error::InvalidArgument("widths and channel counts must be positive".into()));
        }
        if self.group_count == 0 {
            return Err(Error::InvalidArgument("group_count must be positive".into()));
        }
        Ok(())
    }

    /// Cardinality actually used for a stage of `width` channels.
    pub fn groups_for(&self, width: usize) -> usize {
        gcd(self.group_count, width)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One grouped residual block:
/// `relu(conv3x3_grouped(relu(conv3x3_s(x))) + skip(x))`.
#[derive(Clone, Debug, PartialEq, Eq)]
struct BlockParams {
    stride: usize,
    groups: usize,
    entry: (ParamId, ParamId),
    grouped: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
}

impl BlockParams {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let entry = store.add_conv(&format!("{prefix}.entry"), rng, cout, cin, 3, 1);
        let grouped = store.add_conv(&format!("{prefix}.grouped"), rng, cout, cout, 3, groups);
        let skip = (stride != 1 || cin != cout).then(|| store.add_conv(&format!("{prefix}.skip"), rng, cout, cin, 1, 1));
        Self { stride, groups, entry, grouped, skip }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let conv = |g: &mut Graph<T>, x, (w, b): (ParamId, ParamId), spec| g.conv2d(x, bound.var(w), Some(bound.var(b)), spec);
        let h = conv(g, x, self.entry, Conv2dSpec::same(3).with_stride(self.stride))?;
        let h = g.relu(h);
        let h = conv(g, h, self.grouped, Conv2dSpec::same(3).with_groups(self.groups))?;
        let skip = match self.skip {
            Some(p) => conv(g, x, p, Conv2dSpec::default().with_stride(self.stride))?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct DecoderParams {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    classifier: (ParamId, ParamId),
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars<T> {
    pub s_init: Var,
    pub s_final: Var,
    pub decision: Var,
    pub aggregated: Vec<Var>,
    /// `(w_pv, w_art)` per fused stage, SAM mode only.
    pub responses: Vec<(Var, Var)>,
    pub confidence: Vec<ConfidenceMap<T>>,
}

/// Materialised forward results.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T> {
    pub s_init: Tensor<T>,
    pub s_final: Tensor<T>,
    pub aggregated: Vec<Tensor<T>>,
    pub confidence: Vec<ConfidenceMap<T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    pv_blocks: Vec<BlockParams>,
    art_blocks: Vec<BlockParams>,
    sams: Vec<SamParams>,
    decoder: DecoderParams,
    urim: Option<UrimParams>,
}

// Independent init streams so that shared components start identical
// across fusion modes for the same seed.
const STREAM_PV: u64 = 1;
const STREAM_ART: u64 = 2;
const STREAM_SAM: u64 = 3;
const STREAM_DECODER: u64 = 4;
const STREAM_URIM: u64 = 5;

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let widths = &config.stage_widths;

        let encoder = |params: &mut ParamStore<T>, name: &str, rng: &mut Rng| -> Vec<BlockParams> {
            let mut cin = config.input_channels;
            (0..STAGES)
                .map(|i| {
                    let stride = if i == 0 { 1 } else { 2 };
                    let cout = widths[i];
                    let b = BlockParams::init(params, &format!("{name}.stage{}", i + 1), rng, cin, cout, stride, config.groups_for(cout));
                    cin = cout;
                    b
                })
                .collect()
        };
        let pv_blocks = encoder(&mut params, "pv", &mut Rng::derive(seed, STREAM_PV));
        let art_blocks = if config.fusion_mode == FusionMode::Sp {
            Vec::new()
        } else {
            encoder(&mut params, "art", &mut Rng::derive(seed, STREAM_ART))
        };
        let sams = if config.fusion_mode == FusionMode::Sam {
            let mut rng = Rng::derive(seed, STREAM_SAM);
            (1..STAGES).map(|i| SamParams::init(&mut params, &format!("sam{}", i + 1), widths[i], &mut rng)).collect()
        } else {
            Vec::new()
        };

        let mut rng = Rng::derive(seed, STREAM_DECODER);
        let cat: usize = widths[1..].iter().sum();
        let d = config.decision_width;
        let decoder = DecoderParams {
            conv1: params.add_conv("decoder.conv1", &mut rng, d, cat, 3, 1),
            conv2: params.add_conv("decoder.conv2", &mut rng, d, d, 3, 1),
            classifier: params.add_conv("decoder.classifier", &mut rng, 2, d, 1, 1),
        };
        // Zero classifier weights: every variant starts from uniform
        // predictions instead of a saturated softmax with no gradient.
        params.set(decoder.classifier.0, Tensor::zeros(vec![2, d, 1, 1]))?;
        let urim = config
            .urim_enabled
            .then(|| UrimParams::init(&mut params, "urim", d, &mut Rng::derive(seed, STREAM_URIM)));

        Ok(Self { config, params, pv_blocks, art_blocks, sams, decoder, urim })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn sam_params(&self) -> &[SamParams] {
        &self.sams
    }

    pub fn urim_params(&self) -> Option<&UrimParams> {
        self.urim.as_ref()
    }

    fn check_inputs(&self, g: &Graph<T>, pv: Var, art: Var) -> Result<(usize, usize)> {
        let (_, c, h, w) = g.value(pv).dims4()?;
        if g.value(pv).shape() != g.value(art).shape() {
            return Err(Error::Shape(format!(
                "PV input {:?} and ART input {:?} differ",
                g.value(pv).shape(),
                g.value(art).shape()
            )));
        }
        if c != self.config.input_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.config.input_channels)));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Shape(format!("input resolution {h}x{w} is not divisible by {INPUT_MULTIPLE}")));
        }
        Ok((h, w))
    }

    /// Returns the fused features after stages 2..=5 and, in SAM mode, the
    /// response maps of each fusion.
    pub fn encoder_forward(&self, g: &mut Graph<T>, bound: &Bound, pv: Var, art: Var) -> Result<(Vec<Var>, Vec<(Var, Var)>)> {
        self.check_inputs(g, pv, art)?;
        let mut x_pv = self.pv_blocks[0].forward(g, bound, pv)?;
        let mut x_art = match self.config.fusion_mode {
            FusionMode::Sp => None,
            _ => Some(self.art_blocks[0].forward(g, bound, art)?),
        };
        let mut aggregated = Vec::with_capacity(FUSED_STAGES);
        let mut responses = Vec::new();
        for stage in 1..STAGES {
            let f_pv = self.pv_blocks[stage].forward(g, bound, x_pv)?;
            let f_art = match x_art {
                Some(x) => Some(self.art_blocks[stage].forward(g, bound, x)?),
                None => None,
            };
            match (self.config.fusion_mode, f_art) {
                (FusionMode::Sp, _) => {
                    aggregated.push(f_pv);
                    x_pv = f_pv;
                }
                (FusionMode::MpAdd, Some(f_art)) => {
                    let sum = g.add(f_pv, f_art)?;
                    aggregated.push(sum);
                    x_pv = sum;
                    x_art = Some(sum);
                }
                (FusionMode::Sam, Some(f_art)) => {
                    let out = sam_forward(g, bound, &self.sams[stage - 1], f_pv, f_art)?;
                    aggregated.push(out.aggregated);
                    responses.push((out.w_pv, out.w_art));
                    x_pv = out.modulated_pv;
                    x_art = Some(out.modulated_art);
                }
                _ => unreachable!("ART stream exists in every multi-phase mode"),
            }
        }
        Ok((aggregated, responses))
    }

    /// Upsample, concatenate, two 3x3 conv+ReLU to the decision features,
    /// then 1x1 conv and softmax. Returns `(s_init, decision)`.
    pub fn decoder_forward(&self, g: &mut Graph<T>, bound: &Bound, aggregated: &[Var], out_h: usize, out_w: usize) -> Result<(Var, Var)> {
        if aggregated.len() != FUSED_STAGES {
            return Err(Error::Shape(format!("decoder needs {FUSED_STAGES} feature maps, got {}", aggregated.len())));
        }
        let mut ups = Vec::with_capacity(FUSED_STAGES);
        for (i, &a) in aggregated.iter().enumerate() {
            let (_, c, _, _) = g.value(a).dims4()?;
            if c != self.config.stage_widths[i + 1] {
                return Err(Error::Shape(format!("decoder input {i} has {c} channels, expected {}", self.config.stage_widths[i + 1])));
            }
            ups.push(g.upsample(a, out_h, out_w)?);
        }
        let cat = g.concat(&ups)?;
        let conv = |g: &mut Graph<T>, x, (w, b): (ParamId, ParamId), spec| g.conv2d(x, bound.var(w), Some(bound.var(b)), spec);
        let h = conv(g, cat, self.decoder.conv1, Conv2dSpec::same(3))?;
        let h = g.relu(h);
        let h = conv(g, h, self.decoder.conv2, Conv2dSpec::same(3))?;
        let decision = g.relu(h);
        let logits = conv(g, decision, self.decoder.classifier, Conv2dSpec::default())?;
        Ok((g.softmax(logits, 1)?, decision))
    }

    pub fn forward_vars(&self, g: &mut Graph<T>, bound: &Bound, pv: Var, art: Var) -> Result<ForwardVars<T>> {
        self.forward_vars_with(g, bound, pv, art, None)
    }

    /// Forward pass where the refinement head may use a fixed initial
    /// confidence map instead of deriving it from `s_init`. Finite-difference
    /// checks use this to hold the (stop-gradient) confidence constant.
    pub fn forward_vars_with(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        pv: Var,
        art: Var,
        confidence: Option<&ConfidenceMap<T>>,
    ) -> Result<ForwardVars<T>> {
        let (h, w) = self.check_inputs(g, pv, art)?;
        let (aggregated, responses) = self.encoder_forward(g, bound, pv, art)?;
        let (s_init, decision) = self.decoder_forward(g, bound, &aggregated, h, w)?;
        let (s_final, confidence) = match (&self.urim, confidence) {
            (Some(p), Some(m)) => urim_refine_with_confidence(g, bound, p, decision, m.clone())?,
            (Some(p), None) => {
                let s = g.value(s_init).clone();
                urim_refine(g, bound, p, decision, &s)?
            }
            (None, _) => (s_init, Vec::new()),
        };
        Ok(ForwardVars { s_init, s_final, decision, aggregated, responses, confidence })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, pv: &Tensor<T>, art: &Tensor<T>) -> Result<ForwardOutputs<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let pv = g.input(pv.clone());
        let art = g.input(art.clone());
        let v = self.forward_vars(&mut g, &bound, pv, art)?;
        Ok(ForwardOutputs {
            s_init: g.value(v.s_init).clone(),
            s_final: g.value(v.s_final).clone(),
            aggregated: v.aggregated.iter().map(|&a| g.value(a).clone()).collect(),
            confidence: v.confidence,
        })
    }

    /// Loads parameters from another store by name; shapes must match.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count mismatch: network has {}, source has {}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, t) in other.iter() {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            self.params.set(id, t.clone())?;
        }
        Ok(())
    }
}

/// `CE(s_init, target) + CE(s_final, target)`, unweighted.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, outputs: &ForwardVars<T>, target: &[u8]) -> Result<Var> {
    let init = g.cross_entropy(outputs.s_init, target)?;
    let fin = g.cross_entropy(outputs.s_final, target)?;
    g.add(init, fin)
}

const CHECKPOINT_FORMAT: &str = "mpseg-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: NetworkConfig,
    params: Vec<ManifestEntry>,
}

impl<T: Scalar> Network<T> {
    /// Writes a one-line JSON header, a newline, then every parameter as
    /// little-endian `f32` in manifest order. Offsets are relative to the
    /// first payload byte.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.params.numel() * 4);
        for (name, t) in self.params.iter() {
            let offset = payload.len();
            for &v in t.data() {
                payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            entries.push(ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, bytes: payload.len() - offset });
        }
        let header = CheckpointHeader { format: CHECKPOINT_FORMAT.into(), version: 1, config: self.config.clone(), params: entries };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.extend_from_slice(&payload);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header terminator"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unexpected format tag {:?}", header.format)));
        }
        let payload = &bytes[split + 1..];
        let mut net = Network::new(header.config, 0)?;
        if header.params.len() != net.params.len() {
            return Err(Error::format(path, "parameter manifest does not match the configuration"));
        }
        for entry in &header.params {
            let numel: usize = entry.shape.iter().product();
            if entry.bytes != numel * 4 || entry.offset + entry.bytes > payload.len() {
                return Err(Error::format(path, format!("payload too short or inconsistent for {}", entry.name)));
            }
            let data = payload[entry.offset..entry.offset + entry.bytes]
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let id = net
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {}", entry.name)))?;
            net.params.set(id, Tensor::new(entry.shape.clone(), data)?)?;
        }
        if header.params.iter().map(|e| e.bytes).sum::<usize>() != payload.len() {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(seed: u64, h: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut r = Rng::new(seed);
        (r.uniform_tensor(&[1, 3, h, h], 0.0, 1.0), r.uniform_tensor(&[1, 3, h, h], 0.0, 1.0))
    }

    #[test]
    fn aggregated_shapes_follow_stride_arithmetic() {
        let net = Network::<f64>::new(NetworkConfig::default(), 0).unwrap();
        let (pv, art) = inputs(1, 64);
        let out = net.forward(&pv, &art).unwrap();
        let shapes: Vec<_> = out.aggregated.iter().map(|a| a.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 32, 32], vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 128, 4, 4]]);
        assert_eq!(out.s_init.shape(), &[1, 2, 64, 64]);
    }

    #[test]
    fn rejects_bad_resolution() {
        let net = Network::<f64>::new(NetworkConfig::micro(), 0).unwrap();
        let (pv, art) = inputs(1, 24);
        assert!(net.forward(&pv, &art).is_err());
    }

    #[test]
    fn urim_disabled_passes_initial_through() {
        let cfg = NetworkConfig::micro().with_mode(FusionMode::Sam, false);
        let net = Network::<f64>::new(cfg, 3).unwrap();
        let (pv, art) = inputs(2, 16);
        let out = net.forward(&pv, &art).unwrap();
        assert_eq!(out.s_init, out.s_final);
        assert!(out.confidence.is_empty());
    }

    #[test]
    fn zero_classifier_gives_uniform_initial_map() {
        let mut net = Network::<f64>::new(NetworkConfig::micro(), 3).unwrap();
        let id = net.params().find("decoder.classifier.weight").unwrap();
        let shape = net.params().get(id).shape().to_vec();
        net.params_mut().set(id, Tensor::zeros(shape)).unwrap();
        let (pv, art) = inputs(4, 16);
        let out = net.forward(&pv, &art).unwrap();
        assert!(out.s_init.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fusion_mode_names_round_trip() {
        for m in [FusionMode::Sp, FusionMode::MpAdd, FusionMode::Sam] {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }
}
