use proptest::prelude::*;
use ssd_engine::numerics::{bf16_round, cumsum_last, segsum, tril_mask_rowwise, tril_mask_static};
use ssd_engine::oracle::{random_instance, sequential_ssm, InstanceDims};
use ssd_engine::rng::SplitMix64;
use ssd_engine::ssd::{ssd_forward, SsdInputs, SsdOptions};
use ssd_engine::Tensor;

fn dims_strategy(max_len: usize) -> impl Strategy<Value = (InstanceDims, u64)> {
    (1usize..=2, 1..=max_len, 1usize..=4, 1usize..=8, any::<bool>(), 1usize..=8, any::<u64>()).prop_map(
        |(batch, seq_len, heads, head_dim, grouped, state, seed)| {
            let dims = InstanceDims {
                batch,
                seq_len,
                heads,
                head_dim,
                groups: if grouped { heads } else { 1 },
                state,
            };
            (dims, seed)
        },
    )
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bf16_rounding_is_idempotent(v in prop::collection::vec(any::<f32>(), 1..64)) {
        let t = Tensor::new(vec![v.len()], v).unwrap();
        let once = bf16_round(&t);
        prop_assert!(bf16_round(&once).bitwise_eq(&once));
        for (&r, &x) in once.data().iter().zip(t.data()) {
            prop_assert_eq!(r.to_bits() & 0xFFFF, 0);
            if x.is_normal() && r.is_normal() {
                prop_assert!(((r - x) / x).abs() <= 2f32.powi(-8));
            }
        }
    }

    #[test]
    fn mask_strategies_agree_bitwise(
        l in 1usize..40,
        lead in 1usize..4,
        seed in any::<u64>(),
        neg_inf_fill in any::<bool>(),
    ) {
        let mut rng = SplitMix64::new(seed);
        let m = Tensor::new(vec![lead, l, l], (0..lead * l * l).map(|_| rng.normal() * 1e3).collect::<Vec<f64>>()).unwrap();
        let fill = if neg_inf_fill { f64::NEG_INFINITY } else { 0.0 };
        let a = tril_mask_static(&m, fill).unwrap();
        let b = tril_mask_rowwise(&m, fill).unwrap();
        prop_assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn segsum_decays_lie_in_unit_interval(v in prop::collection::vec(-5.0f64..=0.0, 1..40)) {
        let l = v.len();
        let x = Tensor::new(vec![l], v.clone()).unwrap();
        let s = segsum(&x).unwrap();
        let cs = cumsum_last(&x).unwrap();
        prop_assert!((cs.data()[l - 1] - v.iter().sum::<f64>()).abs() < 1e-9);
        for i in 0..l {
            for j in 0..l {
                let e = s.data()[i * l + j].exp();
                if j > i {
                    prop_assert_eq!(e, 0.0);
                } else if j == i {
                    prop_assert_eq!(s.data()[i * l + j], 0.0);
                } else {
                    prop_assert!((0.0..=1.0).contains(&e));
                    let direct: f64 = v[j + 1..=i].iter().sum();
                    prop_assert!((s.data()[i * l + j] - direct).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn outputs_are_causal((dims, seed) in dims_strategy(40), chunk in 1usize..12, cut_frac in 0.0f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let inst = random_instance(&mut rng, dims);
        let t = dims.seq_len;
        let cut = ((t as f64 * cut_frac) as usize).min(t - 1);
        let mut perturbed = inst.inputs.clone();
        let row = |shape: &[usize]| shape[2..].iter().product::<usize>();
        for tensor in [&mut perturbed.x, &mut perturbed.b, &mut perturbed.c, &mut perturbed.dt] {
            let shape = tensor.shape().to_vec();
            let w = row(&shape);
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                if (i / w) % t >= cut {
                    *v *= 1.5;
                }
            }
        }
        let a = ssd_forward(&inst.inputs, SsdOptions::new(chunk), None).unwrap();
        let b = ssd_forward(&perturbed, SsdOptions::new(chunk), None).unwrap();
        let w = dims.heads * dims.head_dim;
        for (i, (ya, yb)) in a.y.data().iter().zip(b.y.data()).enumerate() {
            if (i / w) % t < cut {
                prop_assert!((ya - yb).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn outputs_are_linear_in_inputs_and_state((dims, seed) in dims_strategy(48), chunk in 1usize..20, alpha in -3.0f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let first = random_instance(&mut rng, dims);
        let second = random_instance(&mut rng, dims);
        let combined_x = first.inputs.x.add(&second.inputs.x.map(|v| v * alpha)).unwrap();
        let combined_h = first.initial_state.add(&second.initial_state.map(|v| v * alpha)).unwrap();
        let with_x = |x: &Tensor<f64>| SsdInputs { x: x.clone(), ..first.inputs.clone() };
        let opts = SsdOptions::new(chunk);
        let y1 = ssd_forward(&first.inputs, opts, Some(&first.initial_state)).unwrap();
        let y2 = ssd_forward(&with_x(&second.inputs.x), opts, Some(&second.initial_state)).unwrap();
        let y = ssd_forward(&with_x(&combined_x), opts, Some(&combined_h)).unwrap();
        let want_y = y1.y.add(&y2.y.map(|v| v * alpha)).unwrap();
        let want_s = y1.final_state.add(&y2.final_state.map(|v| v * alpha)).unwrap();
        prop_assert!(max_abs(&y.y, &want_y) <= 1e-9);
        prop_assert!(max_abs(&y.final_state, &want_s) <= 1e-9);
    }

    #[test]
    fn chunked_matches_sequential((dims, seed) in dims_strategy(96), chunk in 1usize..40, with_state in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let inst = random_instance(&mut rng, dims);
        let init = with_state.then_some(&inst.initial_state);
        let out = ssd_forward(&inst.inputs, SsdOptions::new(chunk), init).unwrap();
        let (y, s) = sequential_ssm(&inst.inputs, None, init).unwrap();
        prop_assert!(max_abs(&out.y, &y) <= 1e-10);
        prop_assert!(max_abs(&out.final_state, &s) <= 1e-10);
    }

    #[test]
    fn splitting_a_sequence_threads_the_state((dims, seed) in dims_strategy(64), chunk in 1usize..16, split_frac in 0.0f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let inst = random_instance(&mut rng, dims);
        let t = dims.seq_len;
        prop_assume!(t >= 2);
        let split = 1 + ((t - 1) as f64 * split_frac) as usize;
        let split = split.min(t - 1);
        let slice = |x: &Tensor<f64>, lo: usize, hi: usize| {
            let shape = x.shape();
            let inner: usize = shape[2..].iter().product();
            let mut data = Vec::new();
            for b in 0..shape[0] {
                data.extend_from_slice(&x.data()[(b * shape[1] + lo) * inner..(b * shape[1] + hi) * inner]);
            }
            let mut s = shape.to_vec();
            s[1] = hi - lo;
            Tensor::new(s, data).unwrap()
        };
        let part = |lo, hi| SsdInputs {
            x: slice(&inst.inputs.x, lo, hi),
            dt: slice(&inst.inputs.dt, lo, hi),
            a: inst.inputs.a.clone(),
            b: slice(&inst.inputs.b, lo, hi),
            c: slice(&inst.inputs.c, lo, hi),
        };
        let opts = SsdOptions::new(chunk);
        let whole = ssd_forward(&inst.inputs, opts, None).unwrap();
        let head = ssd_forward(&part(0, split), opts, None).unwrap();
        let tail = ssd_forward(&part(split, t), opts, Some(&head.final_state)).unwrap();
        prop_assert!(max_abs(&tail.final_state, &whole.final_state) <= 1e-10);
        prop_assert!(max_abs(&tail.y, &slice(&whole.y, split, t)) <= 1e-10);
    }
}
