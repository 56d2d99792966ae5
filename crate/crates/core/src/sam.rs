//! Spatial aggregation of two phase feature maps.
//!
//! Channel-wise average/max descriptors of both phases feed a small conv
//! pyramid (3x3 and 5x5 local branches, a pooled 7x7 global branch) whose
//! fused output gives one initial response map per phase. A two-way softmax
//! across phases turns them into weights `w_pv + w_art = 1`, which blend the
//! phase features pixel by pixel. Each stream then continues from the mean of
//! its own features and the blend.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::Conv2dSpec;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Descriptor channels: pv-avg, pv-max, art-avg, art-max.
pub const DESCRIPTOR_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamParams {
    pub channels: usize,
    pub conv3: (ParamId, ParamId),
    pub conv5: (ParamId, ParamId),
    pub conv7: (ParamId, ParamId),
    pub fuse: (ParamId, ParamId),
}

impl SamParams {
    /// Registers the pyramid weights for `channels`-wide phase features.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        let c = channels;
        Self {
            channels,
            conv3: store.add_conv(&format!("{prefix}.conv3"), rng, c, DESCRIPTOR_CHANNELS, 3, 1),
            conv5: store.add_conv(&format!("{prefix}.conv5"), rng, c, DESCRIPTOR_CHANNELS, 5, 1),
            conv7: store.add_conv(&format!("{prefix}.conv7"), rng, c, DESCRIPTOR_CHANNELS, 7, 1),
            fuse: store.add_conv(&format!("{prefix}.fuse"), rng, 2 * c, 3 * c, 3, 1),
        }
    }
}

/// Per-phase pixel-wise modulation weights; `w_pv + w_art == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMaps<T> {
    pub w_pv: Tensor<T>,
    pub w_art: Tensor<T>,
}

/// Tape handles for everything one SAM evaluation produces.
#[derive(Clone, Copy, Debug)]
pub struct SamOutput {
    pub aggregated: Var,
    pub modulated_pv: Var,
    pub modulated_art: Var,
    pub w_pv: Var,
    pub w_art: Var,
}

impl SamOutput {
    pub fn response_maps<T: Scalar>(&self, graph: &Graph<T>) -> ResponseMaps<T> {
        ResponseMaps { w_pv: graph.value(self.w_pv).clone(), w_art: graph.value(self.w_art).clone() }
    }
}

fn check_pair<T: Scalar>(graph: &Graph<T>, a: Var, b: Var) -> Result<()> {
    crate::tensor::ensure_same_shape(graph.value(a), graph.value(b))
}

/// `[pv-avg, pv-max, art-avg, art-max]` along the channel axis.
pub fn extract_descriptors<T: Scalar>(graph: &mut Graph<T>, f_pv: Var, f_art: Var) -> Result<Var> {
    check_pair(graph, f_pv, f_art)?;
    let d_pv = graph.channel_stats(f_pv)?;
    let d_art = graph.channel_stats(f_art)?;
    graph.concat(&[d_pv, d_art])
}

/// Initial (unnormalised) response maps `(w0_pv, w0_art)` from descriptors.
pub fn pyramid_responses<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    params: &SamParams,
    desc: Var,
) -> Result<(Var, Var)> {
    let (_, dc, h, w) = graph.value(desc).dims4()?;
    if dc != DESCRIPTOR_CHANNELS {
        return Err(crate::Error::Shape(format!("descriptor has {dc} channels, expected {DESCRIPTOR_CHANNELS}")));
    }
    let b = |id: (ParamId, ParamId)| (bound.var(id.0), Some(bound.var(id.1)));

    let (w3, b3) = b(params.conv3);
    let local3 = graph.conv2d(desc, w3, b3, Conv2dSpec::same(3))?;
    let (w5, b5) = b(params.conv5);
    let local5 = graph.conv2d(desc, w5, b5, Conv2dSpec::same(5))?;

    // Global branch: pool first, then the 7x7 conv on the 1x1 map.
    let pooled = graph.global_avg_pool(desc)?;
    let (w7, b7) = b(params.conv7);
    let global = graph.conv2d(pooled, w7, b7, Conv2dSpec::same(7))?;
    let global = graph.upsample(global, h, w)?;

    let cat = graph.concat(&[local3, local5, global])?;
    let (wf, bf) = b(params.fuse);
    let fused = graph.conv2d(cat, wf, bf, Conv2dSpec::same(3))?;
    let c = params.channels;
    Ok((graph.slice_channels(fused, 0, c)?, graph.slice_channels(fused, c, c)?))
}

/// Two-way softmax across phases at every `(n, c, h, w)`.
///
/// For two logits this is the logistic function of their difference, which
/// is how it is evaluated.
pub fn normalize_responses<T: Scalar>(graph: &mut Graph<T>, w0_pv: Var, w0_art: Var) -> Result<(Var, Var)> {
    let diff = graph.sub(w0_pv, w0_art)?;
    let w_pv = graph.sigmoid(diff);
    let w_art = graph.one_minus(w_pv);
    Ok((w_pv, w_art))
}

/// `F_aggr = w_pv * f_pv + w_art * f_art`.
pub fn aggregate<T: Scalar>(graph: &mut Graph<T>, f_pv: Var, f_art: Var, w_pv: Var, w_art: Var) -> Result<Var> {
    let a = graph.mul(w_pv, f_pv)?;
    let b = graph.mul(w_art, f_art)?;
    graph.add(a, b)
}

/// `((f_pv + f_aggr) / 2, (f_art + f_aggr) / 2)`.
pub fn modulate_streams<T: Scalar>(graph: &mut Graph<T>, f_pv: Var, f_art: Var, f_aggr: Var) -> Result<(Var, Var)> {
    let half = T::from_f64(0.5);
    let pv = graph.add(f_pv, f_aggr)?;
    let art = graph.add(f_art, f_aggr)?;
    Ok((graph.scale(pv, half), graph.scale(art, half)))
}

/// Full module: descriptors, pyramid, normalisation, aggregation, modulation.
pub fn sam_forward<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    params: &SamParams,
    f_pv: Var,
    f_art: Var,
) -> Result<SamOutput> {
    let (_, c, _, _) = graph.value(f_pv).dims4()?;
    if c != params.channels {
        return Err(crate::Error::Shape(format!("SAM built for {} channels, got {c}", params.channels)));
    }
    let desc = extract_descriptors(graph, f_pv, f_art)?;
    let (w0_pv, w0_art) = pyramid_responses(graph, bound, params, desc)?;
    let (w_pv, w_art) = normalize_responses(graph, w0_pv, w0_art)?;
    let aggregated = aggregate(graph, f_pv, f_art, w_pv, w_art)?;
    let (modulated_pv, modulated_art) = modulate_streams(graph, f_pv, f_art, aggregated)?;
    Ok(SamOutput { aggregated, modulated_pv, modulated_art, w_pv, w_art })
}
