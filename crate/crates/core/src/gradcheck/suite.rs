//! The fixed battery of gradient checks behind `mpseg gradcheck`.
//!
//! Every check runs on three seeds; shapes and values are drawn from the
//! seed so the seeds exercise different geometry, not just different numbers.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{finite_diff_check_with, GradCheckOptions, GradCheckReport, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::net::{total_loss, FusionMode, Network, NetworkConfig};
use crate::ops::Conv2dSpec;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::sam::{sam_forward, SamParams};
use crate::tensor::Tensor;
use crate::urim::{confidence_map, urim_refine_with_confidence, ConfidenceMap, UrimParams};

pub const SUITE_SEEDS: [u64; 3] = [11, 23, 37];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradModule {
    All,
    Core,
    Sam,
    Urim,
    Net,
}

impl GradModule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Core => "core",
            Self::Sam => "sam",
            Self::Urim => "urim",
            Self::Net => "net",
        }
    }

    fn includes(self, other: GradModule) -> bool {
        self == GradModule::All || self == other
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "core" => Ok(Self::Core),
            "sam" => Ok(Self::Sam),
            "urim" => Ok(Self::Urim),
            "net" => Ok(Self::Net),
            other => Err(Error::InvalidArgument(format!("unknown gradcheck module {other:?}"))),
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub check: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn options(seed: u64, max_checks: Option<usize>) -> GradCheckOptions {
    GradCheckOptions { epsilon: DEFAULT_EPSILON, tolerance: DEFAULT_TOLERANCE, max_checks_per_input: max_checks, seed }
}

/// Runs every check belonging to `module`, in a fixed order.
pub fn run_suite(module: GradModule) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for &seed in &SUITE_SEEDS {
        if module.includes(GradModule::Core) {
            for (check, report) in core_checks(seed)? {
                out.push(SuiteEntry { module: "core", check, seed, report });
            }
        }
        if module.includes(GradModule::Sam) {
            out.push(SuiteEntry { module: "sam", check: "sam_forward".into(), seed, report: sam_check(seed)? });
        }
        if module.includes(GradModule::Urim) {
            out.push(SuiteEntry { module: "urim", check: "urim_refine".into(), seed, report: urim_check(seed)? });
        }
        if module.includes(GradModule::Net) {
            for mode in [FusionMode::Sam, FusionMode::MpAdd, FusionMode::Sp] {
                let report = net_check(seed, mode)?;
                out.push(SuiteEntry { module: "net", check: format!("total_loss[{}]", mode.as_str()), seed, report });
            }
        }
    }
    Ok(out)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn core_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = Rng::new(seed);
    let opts = options(seed, None);
    let mut out = Vec::new();
    let n = dim(&mut rng, 1, 2);
    let h = dim(&mut rng, 4, 7);
    let w = dim(&mut rng, 4, 7);

    // Same-padded 3x3 and 5x5 conv with bias.
    for k in [3usize, 5] {
        let cin = dim(&mut rng, 1, 3);
        let cout = dim(&mut rng, 1, 3);
        let x = rng.normal_tensor(&[n, cin, h, w], 1.0);
        let wt = rng.normal_tensor(&[cout, cin, k, k], 0.5);
        let b = rng.normal_tensor(&[cout], 0.5);
        let r = finite_diff_check_with(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(k)),
            &[x, wt, b],
            &opts,
        )?;
        out.push((format!("conv2d_{k}x{k}"), r));
    }

    // Strided grouped conv, the shape used by encoder stage entries.
    {
        let groups = 2;
        let cin = 2 * dim(&mut rng, 1, 2);
        let cout = 2 * dim(&mut rng, 1, 2);
        let x = rng.normal_tensor(&[n, cin, h + 1, w + 1], 1.0);
        let wt = rng.normal_tensor(&[cout, cin / groups, 3, 3], 0.5);
        let b = rng.normal_tensor(&[cout], 0.5);
        let spec = Conv2dSpec::same(3).with_stride(2).with_groups(groups);
        let r = finite_diff_check_with(|g, v| g.conv2d(v[0], v[1], Some(v[2]), spec), &[x, wt, b], &opts)?;
        out.push(("conv2d_strided_grouped".into(), r));
    }

    // Pointwise conv without bias.
    {
        let cin = dim(&mut rng, 2, 4);
        let x = rng.normal_tensor(&[n, cin, h, w], 1.0);
        let wt = rng.normal_tensor(&[2, cin, 1, 1], 0.5);
        let r = finite_diff_check_with(|g, v| g.conv2d(v[0], v[1], None, Conv2dSpec::default()), &[x, wt], &opts)?;
        out.push(("conv2d_1x1".into(), r));
    }

    // Channel mean/max; continuous inputs make argmax ties improbable.
    {
        let c = dim(&mut rng, 2, 5);
        let x = rng.normal_tensor(&[n, c, h, w], 1.0);
        let r = finite_diff_check_with(|g, v| g.channel_stats(v[0]), &[x], &opts)?;
        out.push(("channel_stats".into(), r));
    }

    // Pool to 1x1, 7x7 conv on the pooled map, upsample back.
    {
        let c = dim(&mut rng, 1, 4);
        let x = rng.normal_tensor(&[n, c, h, w], 1.0);
        let wt = rng.normal_tensor(&[2, c, 7, 7], 0.5);
        let b = rng.normal_tensor(&[2], 0.5);
        let r = finite_diff_check_with(
            |g, v| {
                let p = g.global_avg_pool(v[0])?;
                let y = g.conv2d(p, v[1], Some(v[2]), Conv2dSpec::same(7))?;
                g.upsample(y, h, w)
            },
            &[x, wt, b],
            &opts,
        )?;
        out.push(("global_pool_branch".into(), r));
    }

    // Bilinear upsampling by a non-integer factor.
    {
        let c = dim(&mut rng, 1, 3);
        let x = rng.normal_tensor(&[n, c, 3, 4], 1.0);
        let r = finite_diff_check_with(|g, v| g.upsample(v[0], h + 2, w + 3), &[x], &opts)?;
        out.push(("bilinear_upsample".into(), r));
    }

    // Channel softmax followed by cross-entropy.
    {
        let x = rng.normal_tensor(&[n, 2, h, w], 1.5);
        let target: Vec<u8> = (0..n * h * w).map(|_| rng.below(2) as u8).collect();
        let r = finite_diff_check_with(
            |g, v| {
                let s = g.softmax(v[0], 1)?;
                g.cross_entropy(s, &target)
            },
            &[x],
            &opts,
        )?;
        out.push(("softmax_cross_entropy".into(), r));
    }

    // Elementwise ops, pixel masks, bias, concat and slicing together.
    {
        let c = dim(&mut rng, 2, 4);
        let a = rng.normal_tensor(&[n, c, h, w], 1.0);
        let b = rng.normal_tensor(&[n, c, h, w], 1.0);
        let bias = rng.normal_tensor(&[c], 1.0);
        let mask = rng.uniform_tensor::<f64>(&[n, 1, h, w], 0.0, 1.0);
        let r = finite_diff_check_with(
            |g, v| {
                let d = g.sub(v[0], v[1])?;
                let s = g.sigmoid(d);
                let om = g.one_minus(s);
                let p = g.mul(s, v[0])?;
                let q = g.mul(om, v[1])?;
                let sum = g.add(p, q)?;
                let sum = g.scale(sum, 0.7);
                let masked = g.mul_pixel_const(sum, mask.clone())?;
                let biased = g.add_bias(masked, v[2])?;
                let r = g.relu(biased);
                let cat = g.concat(&[r, d])?;
                g.slice_channels(cat, 1, 2 * c - 1)
            },
            &[a, b, bias],
            &opts,
        )?;
        out.push(("elementwise".into(), r));
    }

    // Per-axis softmax over the batch axis.
    {
        let x = rng.normal_tensor(&[2, 2, h, w], 1.0);
        let r = finite_diff_check_with(|g, v| g.softmax(v[0], 0), &[x], &opts)?;
        out.push(("softmax_axis0".into(), r));
    }
    Ok(out)
}

/// Randomises every tensor, biases included, so no ReLU sits on its kink.
fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let fan_in = if t.shape().len() == 4 { t.shape()[1] * t.shape()[2] * t.shape()[3] } else { 4 };
        let bound = (3.0 / fan_in as f64).sqrt();
        let r = rng.uniform_tensor::<f64>(t.shape(), -bound, bound);
        *t = r;
    }
}

fn store_tensors(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn sam_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed ^ 0x5A);
    let c = dim(&mut rng, 2, 3);
    let h = dim(&mut rng, 3, 6);
    let w = dim(&mut rng, 3, 6);
    let mut store = ParamStore::<f64>::new();
    let params = SamParams::init(&mut store, "sam", c, &mut rng);
    randomize(&mut store, &mut rng);
    let mut inputs = store_tensors(&store);
    let np = inputs.len();
    inputs.push(rng.normal_tensor(&[1, c, h, w], 1.0));
    inputs.push(rng.normal_tensor(&[1, c, h, w], 1.0));
    finite_diff_check_with(
        |g, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let o = sam_forward(g, &bound, &params, v[np], v[np + 1])?;
            g.concat(&[o.aggregated, o.modulated_pv, o.modulated_art, o.w_pv])
        },
        &inputs,
        &options(seed, Some(24)),
    )
}

fn urim_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed ^ 0x0C);
    let d = dim(&mut rng, 2, 4);
    let h = dim(&mut rng, 5, 8);
    let w = dim(&mut rng, 5, 8);
    let mut store = ParamStore::<f64>::new();
    let params = UrimParams::init(&mut store, "urim", d, &mut rng);
    randomize(&mut store, &mut rng);
    // A fixed uncertain band so the LC layers see partial windows.
    let logits: Tensor<f64> = rng.normal_tensor(&[1, 2, h, w], 1.5);
    let s_init = crate::ops::softmax(&logits, 1)?;
    let m: ConfidenceMap<f64> = confidence_map(&s_init)?;
    let mut inputs = store_tensors(&store);
    let np = inputs.len();
    inputs.push(rng.normal_tensor::<f64>(&[1, d, h, w], 1.0).map(|v| v.abs() + 0.1));
    finite_diff_check_with(
        |g, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let (s, _) = urim_refine_with_confidence(g, &bound, &params, v[np], m.clone())?;
            Ok::<Var, Error>(s)
        },
        &inputs,
        &options(seed, Some(24)),
    )
}

/// Whole micro network, `1x3x16x16`, loss over both heads.
fn net_check(seed: u64, mode: FusionMode) -> Result<GradCheckReport> {
    let config = NetworkConfig::micro().with_mode(mode, true);
    let mut net = Network::<f64>::new(config, seed)?;
    let mut rng = Rng::new(seed ^ 0xE2E);
    randomize(net.params_mut(), &mut rng);
    let pv = rng.uniform_tensor::<f64>(&[1, 3, 16, 16], 0.0, 1.0);
    let art = rng.uniform_tensor::<f64>(&[1, 3, 16, 16], 0.0, 1.0);
    let target: Vec<u8> = (0..256).map(|i| u8::from((i / 16) % 16 > 5 && i % 16 > 4)).collect();

    // Confidence is stop-gradient: take it from the unperturbed pass.
    let frozen = net.forward(&pv, &art)?.s_init;
    let confidence = confidence_map(&frozen)?;

    let inputs = store_tensors(net.params());
    finite_diff_check_with(
        |g, v| {
            let bound = Bound::from_vars(v.to_vec());
            let x_pv = g.input(pv.clone());
            let x_art = g.input(art.clone());
            let outputs = net.forward_vars_with(g, &bound, x_pv, x_art, Some(&confidence))?;
            total_loss(g, &outputs, &target)
        },
        &inputs,
        &options(seed, Some(8)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_round_trip() {
        for m in [GradModule::All, GradModule::Core, GradModule::Sam, GradModule::Urim, GradModule::Net] {
            assert_eq!(m.as_str().parse::<GradModule>().unwrap(), m);
        }
        assert!("nope".parse::<GradModule>().is_err());
    }

    #[test]
    fn core_suite_passes() {
        let entries = run_suite(GradModule::Core).unwrap();
        for e in &entries {
            assert!(e.report.pass, "{} seed {}: {:?}", e.check, e.seed, e.report);
        }
    }
}
