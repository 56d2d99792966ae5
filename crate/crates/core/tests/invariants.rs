use mpseg_core::ops::{bilinear_upsample, conv2d, softmax, Conv2dSpec};
use mpseg_core::params::Bound;
use mpseg_core::phantom::{center_align, centroid, generate_phantom_case, hu_clip, translate, PhantomParams};
use mpseg_core::sam::{sam_forward, SamParams};
use mpseg_core::urim::{confidence_map, lc_conv};
use mpseg_core::{ConfidenceMap, Graph, ParamStore, Rng, Tensor, Volume};
use proptest::prelude::*;

fn dims(rng: &mut Rng) -> (usize, usize, usize, usize) {
    (1 + rng.below(2), 1 + rng.below(4), 2 + rng.below(7), 2 + rng.below(7))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed: u64, axis in 0usize..4) {
        let mut rng = Rng::new(seed);
        let (n, c, h, w) = dims(&mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[n, c, h, w], 30.0);
        let y = softmax(&x, axis).unwrap();
        let shape = [n, c, h, w];
        let stride: usize = shape[axis + 1..].iter().product();
        for (i, _) in y.data().iter().enumerate().filter(|(i, _)| (i / stride) % shape[axis] == 0) {
            let s: f64 = (0..shape[axis]).map(|k| y.data()[i + k * stride]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn upsampling_stays_within_input_range(seed: u64, dh in 0usize..12, dw in 0usize..12) {
        let mut rng = Rng::new(seed);
        let (n, c, h, w) = dims(&mut rng);
        let (oh, ow) = (h + dh, w + dw);
        let x: Tensor<f64> = rng.uniform_tensor(&[n, c, h, w], -3.0, 5.0);
        let y = bilinear_upsample(&x, oh, ow).unwrap();
        for b in 0..n * c {
            let src = &x.data()[b * h * w..(b + 1) * h * w];
            let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
            prop_assert!(y.data()[b * oh * ow..(b + 1) * oh * ow].iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    /// A grouped convolution equals the ungrouped one with a block-diagonal
    /// kernel.
    #[test]
    fn grouped_conv_matches_block_diagonal(seed: u64, groups in 1usize..4, stride in 1usize..3) {
        let mut rng = Rng::new(seed);
        let (cin_g, cout_g) = (1 + rng.below(3), 1 + rng.below(3));
        let (cin, cout) = (cin_g * groups, cout_g * groups);
        let x: Tensor<f64> = rng.normal_tensor(&[2, cin, 7, 6], 1.0);
        let wg: Tensor<f64> = rng.normal_tensor(&[cout, cin_g, 3, 3], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[cout], 1.0);
        let mut full = Tensor::<f64>::zeros(vec![cout, cin, 3, 3]);
        for o in 0..cout {
            let g = o / cout_g;
            for i in 0..cin_g {
                let src = &wg.data()[(o * cin_g + i) * 9..(o * cin_g + i + 1) * 9];
                let at = (o * cin + g * cin_g + i) * 9;
                full.data_mut()[at..at + 9].copy_from_slice(src);
            }
        }
        let spec = Conv2dSpec::same(3).with_stride(stride);
        let a = conv2d(&x, &wg, Some(&b), spec.with_groups(groups)).unwrap();
        let e = conv2d(&x, &full, Some(&b), spec).unwrap();
        prop_assert_eq!(a.shape(), e.shape());
        prop_assert!(a.data().iter().zip(e.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn rng_streams_are_reproducible(seed: u64, idx: u64) {
        let draw = |mut r: Rng| (0..8).map(|_| r.uniform().to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(draw(Rng::derive(seed, idx)), draw(Rng::derive(seed, idx)));
        prop_assert_ne!(draw(Rng::derive(seed, idx)), draw(Rng::derive(seed, idx.wrapping_add(1))));
    }

    #[test]
    fn confidence_is_bounded_and_symmetric(p in 0.0f64..=1.0) {
        let s = Tensor::new(vec![1, 2, 1, 1], vec![p, 1.0 - p]).unwrap();
        let m = confidence_map(&s).unwrap().values().data()[0];
        let swapped = Tensor::new(vec![1, 2, 1, 1], vec![1.0 - p, p]).unwrap();
        prop_assert!((0.0..1.0).contains(&m));
        prop_assert_eq!(m, confidence_map(&swapped).unwrap().values().data()[0]);
    }

    #[test]
    fn translation_round_trips_inside_the_volume(seed: u64) {
        let mut rng = Rng::new(seed);
        let shape = [2 + rng.below(4), 4 + rng.below(6), 4 + rng.below(6)];
        let mut data = vec![0u8; shape.iter().product()];
        for z in 1..shape[0] - 1 {
            for y in 1..shape[1] - 1 {
                data[(z * shape[1] + y) * shape[2] + 1] = 1;
            }
        }
        let v = Volume::new(shape, [1.0; 3], data).unwrap();
        let shift = [0, rng.below(2) as i64, 1];
        let back = translate(&translate(&v, shift, 0), shift.map(|s| -s), 0);
        prop_assert_eq!(back, v);
    }
}

/// LC-Conv of `x` under a constant confidence map.
fn lc_with_constant(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, c: f64) -> Tensor<f64> {
    let (n, _, h, wd) = x.dims4().unwrap();
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let out = lc_conv(&mut g, xv, &ConfidenceMap::constant([n, 1, h, wd], c), wv, bv).unwrap();
    g.value(out).clone()
}

#[test]
fn lc_conv_ignores_uniform_confidence_scale() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 3, 6, 5], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[4, 3, 3, 3], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[4], 1.0);
        let base = lc_with_constant(&x, &w, &b, 1.0);
        for c in [0.1, 10.0] {
            let other = lc_with_constant(&x, &w, &b, c);
            assert!(other.data().iter().zip(base.data()).all(|(p, q)| (p - q).abs() <= 1e-6), "seed {seed} c {c}");
        }
        let zero = lc_with_constant(&x, &w, &b, 0.0);
        for (i, v) in zero.data().iter().enumerate() {
            assert_eq!(*v, b.data()[i / 30]);
        }
    }
}

#[test]
fn sam_weights_are_convex() {
    for seed in 0..20 {
        let mut rng = Rng::new(100 + seed);
        let c = 1 + rng.below(4);
        let mut store = ParamStore::<f64>::new();
        let params = SamParams::init(&mut store, "sam", c, &mut rng);
        let mut g = Graph::new();
        let bound: Bound = store.bind(&mut g);
        let f_pv: Tensor<f64> = rng.normal_tensor(&[2, c, 5, 6], 2.0);
        let f_art: Tensor<f64> = rng.normal_tensor(&[2, c, 5, 6], 2.0);
        let (pv, art) = (g.input(f_pv.clone()), g.input(f_art.clone()));
        let out = sam_forward(&mut g, &bound, &params, pv, art).unwrap();
        let maps = out.response_maps(&g);
        let aggr = g.value(out.aggregated);
        for i in 0..aggr.data().len() {
            let (wp, wa) = (maps.w_pv.data()[i], maps.w_art.data()[i]);
            assert!((wp + wa - 1.0).abs() <= 1e-6);
            let (a, b) = (f_pv.data()[i], f_art.data()[i]);
            let v = aggr.data()[i];
            assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12, "seed {seed} index {i}");
        }
    }
}

#[test]
fn phantoms_are_seed_deterministic() {
    let params = PhantomParams::default();
    for seed in 0..100u64 {
        let a = generate_phantom_case(seed, [6, 32, 32], &params, "a").unwrap();
        let b = generate_phantom_case(seed, [6, 32, 32], &params, "a").unwrap();
        assert_eq!(a.pv.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.pv.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.art.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.art.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!((&a.tumor, &a.liver), (&b.tumor, &b.liver));
        assert_eq!(serde_json::to_string(&a.meta).unwrap(), serde_json::to_string(&b.meta).unwrap());

        let s = &a.meta.sectors;
        assert!(s.pv_fraction < 1.0 && s.art_fraction < 1.0, "seed {seed}: {s:?}");
        assert!(s.union_fraction > 0.999, "seed {seed}: {s:?}");
        assert!(a.tumor.data().iter().zip(a.liver.data()).all(|(&t, &l)| t <= l));
    }
    let full = PhantomParams { visibility: 1.0, ..params };
    let c = generate_phantom_case(3, [6, 32, 32], &full, "c").unwrap();
    assert_eq!((c.meta.sectors.pv_fraction, c.meta.sectors.art_fraction), (1.0, 1.0));
}

#[test]
fn center_align_recovers_constructed_offsets() {
    let mut rng = Rng::new(17);
    for _ in 0..30 {
        let shape = [10, 24, 24];
        let mut m = vec![0u8; 10 * 24 * 24];
        let (z0, y0, x0) = (3 + rng.below(2), 7 + rng.below(4), 7 + rng.below(4));
        for z in z0..z0 + 3 {
            for y in y0..y0 + 1 + rng.below(5) {
                for x in x0..x0 + 4 {
                    m[(z * 24 + y) * 24 + x] = 1;
                }
            }
        }
        let reference = Volume::new(shape, [1.0; 3], m).unwrap();
        let shift = [rng.below(5) as i64 - 2, rng.below(9) as i64 - 4, rng.below(9) as i64 - 4];
        let moving_mask = translate(&reference, shift, 0);
        let moving = moving_mask.map(|v| v as f32 * 100.0).unwrap();
        let (img, mask, applied) = center_align(&reference, &moving, &moving_mask).unwrap();
        assert_eq!(applied, shift.map(|s| -s));
        let (a, b) = (centroid(&reference).unwrap(), centroid(&mask).unwrap());
        assert!(a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 0.5));
        assert_eq!(img.data().iter().filter(|&&v| v > 0.0).count(), mask.data().iter().filter(|&&v| v == 1).count());
    }
    let empty = Volume::filled([2, 2, 2], [1.0; 3], 0u8).unwrap();
    assert!(center_align(&empty, &Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap(), &empty).is_err());
}

#[test]
fn hu_window_endpoints() {
    let v = Volume::new([1, 1, 4], [1.0; 3], vec![500.0f32, -200.0, 0.0, 180.0]).unwrap();
    assert_eq!(hu_clip(&v).data(), &[180.0, -70.0, 0.0, 180.0]);
}
