//! Confidence-guided refinement of the decoder's initial prediction.
//!
//! Pixels whose two class probabilities are close get low confidence.
//! Four local-confidence convolutions let such pixels take their features
//! from confident neighbours; between layers the confidence map grows by a
//! 3x3 max filter, so uncertain regions shrink from their borders inwards.
//! Confidence is a constant mask on the tape: no gradient flows through it.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{box_sum3x3, max_filter3x3, Conv2dSpec};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LC_LAYERS: usize = 4;
/// Windows whose confidence sum is at or below this emit the bias only.
pub const DEGENERATE_WINDOW: f64 = 1e-8;
/// Floor on the smaller class probability before the ratio is taken.
pub const MIN_PROB_FLOOR: f64 = 1e-12;

/// Per-pixel classification confidence, `[N,1,H,W]`, values in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap<T>(Tensor<T>);

impl<T: Scalar> ConfidenceMap<T> {
    /// Wraps raw values; they must be 4-D with one channel and lie in `[0, 1]`.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("confidence map needs 1 channel, got {c}")));
        }
        if values.data().iter().any(|&v| !(v >= T::ZERO && v <= T::ONE)) {
            return Err(Error::InvalidArgument("confidence values must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    /// Uniform map, used by tests and the scale-invariance checks.
    pub fn constant(shape: [usize; 4], value: T) -> Self {
        Self(Tensor::full(shape.to_vec(), value))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<T> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UrimParams {
    pub width: usize,
    pub lc: Vec<(ParamId, ParamId)>,
    /// 1x1 conv from `[refined, decision]` (2 * width channels) to 2 logits.
    pub fuse: (ParamId, ParamId),
}

impl UrimParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut Rng) -> Self {
        let lc = (0..LC_LAYERS)
            .map(|i| store.add_conv(&format!("{prefix}.lc{i}"), rng, width, width, 3, 1))
            .collect();
        let fuse = store.add_conv(&format!("{prefix}.fuse"), rng, 2, 2 * width, 1, 1);
        store.set(fuse.0, Tensor::zeros(vec![2, 2 * width, 1, 1])).expect("same shape");
        Self { width, lc, fuse }
    }
}

/// `1 - exp(1 - S_max / S_min)` per pixel of a two-class probability map.
///
/// Results are capped at the largest value below one: for very confident
/// pixels the exact value is closer to 1 than any representable number.
pub fn confidence_map<T: Scalar>(s: &Tensor<T>) -> Result<ConfidenceMap<T>> {
    let (n, c, h, w) = s.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("confidence map needs 2 class channels, got {c}")));
    }
    let plane = h * w;
    let tol = 1e-6f64.max(16.0 * T::EPSILON.to_f64());
    let below_one = T::ONE - T::EPSILON / T::from_f64(2.0);
    let floor = T::from_f64(MIN_PROB_FLOOR);
    let p = s.data();
    let mut out = Tensor::zeros(vec![n, 1, h, w]);
    for b in 0..n {
        for px in 0..plane {
            let a = p[(b * 2) * plane + px];
            let q = p[(b * 2 + 1) * plane + px];
            let sum = a.to_f64() + q.to_f64();
            if a < T::ZERO || q < T::ZERO || (sum - 1.0).abs() > tol {
                return Err(Error::NotNormalized { index: b * plane + px, sum });
            }
            let (hi, lo) = if a >= q { (a, q) } else { (q, a) };
            let m = T::ONE - (T::ONE - hi / lo.max(floor)).exp();
            out.data_mut()[b * plane + px] = m.min(below_one);
        }
    }
    Ok(ConfidenceMap(out))
}

/// 3x3 max filter (zero padding): confident pixels spread to neighbours.
pub fn update_confidence<T: Scalar>(m: &ConfidenceMap<T>) -> Result<ConfidenceMap<T>> {
    Ok(ConfidenceMap(max_filter3x3(&m.0)?))
}

/// Local-confidence convolution on the tape:
/// `(W^T (X * M)) / sum(M) + b` per 3x3 window.
pub fn lc_conv<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    m: &ConfidenceMap<T>,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let ws = graph.value(weight).shape().to_vec();
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::Shape(format!("LC-Conv needs a 3x3 kernel, got {ws:?}")));
    }
    let (n, _, h, w) = graph.value(x).dims4()?;
    if m.0.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!("confidence {:?} does not match features {:?}", m.0.shape(), [n, h, w])));
    }
    let window = box_sum3x3(&m.0)?;
    let eps = T::from_f64(DEGENERATE_WINDOW);
    let inv = window.map(|s| if s > eps { T::ONE / s } else { T::ZERO });
    let masked = graph.mul_pixel_const(x, m.0.clone())?;
    let conv = graph.conv2d(masked, weight, None, Conv2dSpec::same(3))?;
    let normalised = graph.mul_pixel_const(conv, inv)?;
    graph.add_bias(normalised, bias)
}

/// Refinement head. Returns the final class probabilities and the
/// confidence map before each LC-Conv layer plus the last update.
pub fn urim_refine<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    params: &UrimParams,
    decision: Var,
    s_init: &Tensor<T>,
) -> Result<(Var, Vec<ConfidenceMap<T>>)> {
    let m = confidence_map(s_init)?;
    urim_refine_with_confidence(graph, bound, params, decision, m)
}

/// [`urim_refine`] with an explicit initial confidence map.
pub fn urim_refine_with_confidence<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    params: &UrimParams,
    decision: Var,
    initial: ConfidenceMap<T>,
) -> Result<(Var, Vec<ConfidenceMap<T>>)> {
    let (_, d, _, _) = graph.value(decision).dims4()?;
    if d != params.width {
        return Err(Error::Shape(format!("URIM built for width {}, got {d}", params.width)));
    }
    let mut m = initial;
    let mut trace = Vec::with_capacity(LC_LAYERS + 1);
    let mut x = decision;
    for &(w, b) in &params.lc {
        let y = lc_conv(graph, x, &m, bound.var(w), bound.var(b))?;
        x = graph.relu(y);
        let next = update_confidence(&m)?;
        trace.push(std::mem::replace(&mut m, next));
    }
    trace.push(m);
    let cat = graph.concat(&[x, decision])?;
    let logits = graph.conv2d(cat, bound.var(params.fuse.0), Some(bound.var(params.fuse.1)), Conv2dSpec::default())?;
    Ok((graph.softmax(logits, 1)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(pairs: &[(f64, f64)]) -> Tensor<f64> {
        let n = pairs.len();
        let mut v: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        v.extend(pairs.iter().map(|p| p.1));
        Tensor::new(vec![1, 2, 1, n], v).unwrap()
    }

    #[test]
    fn confidence_examples() {
        let m = confidence_map(&probs(&[(0.5, 0.5), (0.9, 0.1), (2.0 / 3.0, 1.0 / 3.0), (0.1, 0.9)])).unwrap();
        let v = m.values().data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - (1.0 - (-8.0f64).exp())).abs() < 1e-12);
        assert!((v[2] - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(v[1], v[3]);
        assert!(confidence_map(&probs(&[(0.7, 0.7)])).is_err());
        assert!(confidence_map(&probs(&[(1.0, 0.0)])).unwrap().values().data()[0] < 1.0);
    }

    #[test]
    fn lc_conv_center_only_window() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let mut mv = Tensor::zeros(vec![1, 1, 3, 3]);
        mv.data_mut()[4] = 1.0;
        let m = ConfidenceMap::new(mv).unwrap();
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(vec![1]));
        let y = lc_conv(&mut g, x, &m, w, b).unwrap();
        assert_eq!(g.value(y).at4(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn lc_conv_degenerate_window_returns_bias() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 2, 4, 4], 3.0));
        let m = ConfidenceMap::constant([1, 1, 4, 4], 0.0);
        let w = g.input(Tensor::full(vec![2, 2, 3, 3], 1.0));
        let b = g.input(Tensor::full(vec![2], 0.3));
        let y = lc_conv(&mut g, x, &m, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn saturated_confidence_trace() {
        let mut store = ParamStore::<f64>::new();
        let p = UrimParams::init(&mut store, "urim", 4, &mut Rng::new(2));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let dec = g.input(Rng::new(3).normal_tensor(&[1, 4, 6, 6], 1.0));
        let mut s = Tensor::zeros(vec![1, 2, 6, 6]);
        for (i, v) in s.data_mut().iter_mut().enumerate() {
            *v = if i < 36 { 1.0 - 1e-6 } else { 1e-6 };
        }
        let (out, trace) = urim_refine(&mut g, &bound, &p, dec, &s).unwrap();
        assert_eq!(trace.len(), LC_LAYERS + 1);
        assert!(trace[0].values().data().iter().all(|&v| v > 0.999999));
        let o = g.value(out);
        for px in 0..36 {
            assert!((o.data()[px] + o.data()[36 + px] - 1.0).abs() < 1e-12);
        }
    }
}
