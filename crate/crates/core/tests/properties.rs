use infomask::datagen::{generate_one, split, BBox, Distractor, SynthConfig};
use infomask::metrics::{auc, binarize, fpr_fnr, iop, BinaryMask};
use infomask::model::{self, ClassifierInput, ModelConfig, ModelParams, Widths};
use infomask::objective::{batch_loss, LossConfig, Variant};
use infomask::tensor::{conv_output_extent, grad_check, Tape, Tensor};
use infomask::train::{select_checkpoint, tune_threshold, Checkpoint};
use proptest::prelude::*;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape, values.to_vec()).unwrap()
}

fn tiny_model(input: ClassifierInput) -> ModelConfig {
    ModelConfig { widths: Widths::divided(16), classifier_input: input }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_and_pool_extents(h in 1usize..12, w in 1usize..12, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..100) {
        let x = Tensor::from_fn(&[1, 2, h, w], |i| ((i as u64 * 7 + seed) % 11) as f64 / 11.0);
        let kern = Tensor::from_fn(&[3, 2, k, k], |i| (i % 5) as f64 - 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let kv = tape.constant(kern);
        let out = tape.conv2d(xv, kv, None, stride, pad);
        match (conv_output_extent(h, k, stride, pad), conv_output_extent(w, k, stride, pad)) {
            (Some(oh), Some(ow)) => {
                prop_assert_eq!(oh, (h + 2 * pad - k) / stride + 1);
                prop_assert_eq!(tape.value(out.unwrap()).shape(), &[1, 3, oh, ow][..]);
            }
            _ => {
                prop_assert!(h + 2 * pad < k || w + 2 * pad < k);
                prop_assert!(out.is_err());
            }
        }
        if h % 2 == 0 && w % 2 == 0 {
            let p = tape.max_pool2d(xv, 2).unwrap();
            prop_assert_eq!(tape.value(p).shape(), &[1, 2, h / 2, w / 2][..]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, values in prop::collection::vec(-30.0f64..30.0, 10)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, 2, 1, 1], values[..rows * 2].to_vec()).unwrap());
        let p = tape.softmax(x).unwrap();
        for r in tape.value(p).data().chunks(2) {
            prop_assert!(r.iter().all(|&v| v > 0.0));
            prop_assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear_over_independent_subgraphs(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(0.1f64..2.0, 6)) {
        let f = |tape: &mut Tape, v| -> infomask::tensor::Result<_> {
            let s = tape.sigmoid(v)?;
            let m = tape.mul(s, v)?;
            tape.sum_all(m)
        };
        let g = |tape: &mut Tape, v| -> infomask::tensor::Result<_> {
            let l = tape.log(v, 1e-12)?;
            let s = tape.softplus(l)?;
            tape.mean_all(s)
        };
        let mut joint = Tape::new();
        let (av, bv) = (joint.param(tensor(&[1, 6], &a)), joint.param(tensor(&[1, 6], &b)));
        let (fa, gb) = (f(&mut joint, av).unwrap(), g(&mut joint, bv).unwrap());
        let total = joint.add(fa, gb).unwrap();
        joint.backward(total).unwrap();
        let mut solo = Tape::new();
        let av2 = solo.param(tensor(&[1, 6], &a));
        let fa2 = f(&mut solo, av2).unwrap();
        solo.backward(fa2).unwrap();
        let mut solo_b = Tape::new();
        let bv2 = solo_b.param(tensor(&[1, 6], &b));
        let gb2 = g(&mut solo_b, bv2).unwrap();
        solo_b.backward(gb2).unwrap();
        prop_assert_eq!(joint.grad(av).unwrap(), solo.grad(av2).unwrap());
        prop_assert_eq!(joint.grad(bv).unwrap(), solo_b.grad(bv2).unwrap());
    }

    #[test]
    fn smooth_primitives_pass_grad_check(values in prop::collection::vec(-2.0f64..2.0, 8)) {
        let x = tensor(&[1, 2, 2, 2], &values);
        let err = grad_check(|t, v| {
            let s = t.softplus(v)?;
            let g = t.sigmoid(v)?;
            let m = t.mul(s, g)?;
            let c = t.channel_sum(m)?;
            let u = t.upsample_nearest(c, 2)?;
            let a = t.global_avg_pool(u)?;
            t.sum_all(a)
        }, &x, 1e-6).unwrap();
        prop_assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn reparameterization_gradients(mu in prop::collection::vec(-3.0f64..3.0, 4), sigma in prop::collection::vec(0.01f64..3.0, 4), eps in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut tape = Tape::new();
        let m = tape.param(tensor(&[1, 1, 2, 2], &mu));
        let s = tape.param(tensor(&[1, 1, 2, 2], &sigma));
        let e = tape.constant(tensor(&[1, 1, 2, 2], &eps));
        let z = model::sample_latent(&mut tape, m, s, e).unwrap();
        let total = tape.sum_all(z).unwrap();
        tape.backward(total).unwrap();
        prop_assert!(tape.grad(m).unwrap().data().iter().all(|&g| g == 1.0));
        let gs = tape.grad(s).unwrap();
        prop_assert_eq!(gs.data(), &eps[..]);
        prop_assert!(!tape.requires_grad(e));
    }

    #[test]
    fn forward_shape_contract(hb in 1usize..4, wb in 1usize..4, seed in 0u64..50) {
        let (h, w) = (hb * 4, wb * 4);
        let params = ModelParams::init(tiny_model(ClassifierInput::Mask), seed);
        let x = Tensor::from_fn(&[2, 1, h, w], |i| ((i as u64 * 13 + seed) % 17) as f64 / 17.0);
        let eps = Tensor::from_fn(&[2, 1, h, w], |i| ((i % 7) as f64 - 3.0) / 2.0);
        let out = model::forward(&params, &x, Some(&eps), 0.5).unwrap();
        let s = out.state.unwrap();
        for t in [&s.attention, &s.mu, &s.sigma, &s.eps, &s.z, &s.z_tilde, &s.mask] {
            prop_assert_eq!(t.shape(), x.shape());
        }
        prop_assert!(s.attention.data().iter().all(|&v| v >= 0.0));
        prop_assert!(s.sigma.data().iter().all(|&v| v >= model::SIGMA_FLOOR));
        for p in out.class_probs {
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_finite_on_valid_domain(seed in 0u64..40, big in prop::bool::ANY, alpha in 0.0f64..10.0) {
        let cfg = tiny_model(ClassifierInput::Mask);
        let mut params = ModelParams::init(cfg, seed);
        if big {
            // saturate the softmax so the probability floor is exercised
            for t in params.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= 40.0);
            }
        }
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i as u64 * 31 + seed) % 23) as f64 / 23.0);
        let eps = vec![Tensor::from_fn(&[2, 1, 8, 8], |i| ((i % 9) as f64 - 4.0) * 1.5)];
        let loss_cfg = LossConfig::new(Variant::InfoMask, alpha, 0.0, 1).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let loss = batch_loss(&mut tape, &cfg, &b, xv, &[0, 1], &eps, 0.5, &loss_cfg).unwrap();
        prop_assert!(loss.breakdown.total.is_finite());
        prop_assert!(tape.backward(loss.total).is_ok());
    }

    #[test]
    fn kl_component_ignores_alpha(seed in 0u64..20, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
        let cfg = tiny_model(ClassifierInput::Mask);
        let params = ModelParams::init(cfg, seed);
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 5) as f64 / 5.0);
        let eps = vec![Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 3) as f64 - 1.0)];
        let run = |alpha: f64| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let l = LossConfig::new(Variant::InfoMask, alpha, 0.0, 1).unwrap();
            batch_loss(&mut tape, &cfg, &b, xv, &[1], &eps, 0.5, &l).unwrap().breakdown
        };
        let (lo, hi) = if a1 <= a2 { (run(a1), run(a2)) } else { (run(a2), run(a1)) };
        prop_assert_eq!(lo.kl, hi.kl);
        prop_assert!(hi.total >= lo.total);
    }

    #[test]
    fn scores_in_unit_range_and_whole_image_identity(w in 1usize..9, h in 1usize..9, bits in prop::collection::vec(prop::bool::ANY, 64), corners in prop::collection::vec(0usize..8, 4)) {
        let (x0, x1) = (corners[0] % w, corners[1] % w);
        let (y0, y1) = (corners[2] % h, corners[3] % h);
        let b = BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)).unwrap();
        let pred = BinaryMask::new(w, h, bits[..w * h].to_vec());
        let (fpr, fnr) = fpr_fnr(&pred, &b);
        for v in [iop(&pred, &b), fpr, Some(fnr)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let all = BinaryMask::new(w, h, vec![true; w * h]);
        prop_assert_eq!(iop(&all, &b), Some(b.area() as f64 / (w * h) as f64));
        let (fpr_all, fnr_all) = fpr_fnr(&all, &b);
        prop_assert_eq!(fnr_all, 0.0);
        if b.area() < w * h {
            prop_assert_eq!(fpr_all, Some(1.0));
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform(scores in prop::collection::vec(-3.0f64..3.0, 2..30), seed in 0usize..1000) {
        let labels: Vec<usize> = (0..scores.len()).map(|i| (i * 7 + seed) % 3 % 2).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 5.0).collect();
        prop_assert_eq!(auc(&scores, &labels), auc(&mapped, &labels));
    }

    #[test]
    fn selection_ignores_checkpoint_order(accs in prop::collection::vec(0usize..4, 1..8), iops in prop::collection::vec(0usize..4, 8), n in 1usize..8, rot in 0usize..8) {
        let params = ModelParams::zeros(tiny_model(ClassifierInput::Mask));
        let cks: Vec<Checkpoint> = accs.iter().enumerate().map(|(i, &a)| Checkpoint {
            epoch: i + 1,
            params: params.clone(),
            val_accuracy: a as f64 / 4.0,
            val_iop: iops[i] as f64 / 4.0,
            threshold: Some(0.5),
        }).collect();
        let n = n.min(cks.len());
        let mut shuffled = cks.clone();
        shuffled.rotate_left(rot % cks.len());
        shuffled.reverse();
        prop_assert_eq!(select_checkpoint(&cks, n).unwrap().epoch, select_checkpoint(&shuffled, n).unwrap().epoch);
    }

    #[test]
    fn tuned_threshold_is_constrained_grid_max(maps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 16), 1..6), cap in 0.2f64..1.0) {
        let boxes: Vec<Option<BBox>> = (0..maps.len()).map(|i| BBox::new(i % 2, 0, 2 + i % 2, 2)).collect();
        let grid: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let stats = |t: f64| {
            let mut iops = Vec::new();
            let mut fnr = 0.0;
            for (m, b) in maps.iter().zip(&boxes) {
                let pred = binarize(m, 4, 4, t);
                iops.extend(iop(&pred, b.as_ref().unwrap()));
                fnr += fpr_fnr(&pred, b.as_ref().unwrap()).1;
            }
            (iops.iter().sum::<f64>() / iops.len().max(1) as f64, iops.len(), fnr / maps.len() as f64)
        };
        let feasible: Vec<(f64, f64)> = grid.iter().filter_map(|&t| {
            let (m, n, f) = stats(t);
            (n > 0 && f <= cap).then_some((t, m))
        }).collect();
        match tune_threshold(&maps, &boxes, 4, 4, &grid, cap) {
            Ok(choice) => {
                prop_assert!(grid.contains(&choice.threshold));
                let best = feasible.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(choice.mean_iop, best);
                let first = feasible.iter().find(|f| f.1 == best).unwrap().0;
                prop_assert_eq!(choice.threshold, first);
            }
            Err(_) => prop_assert!(feasible.is_empty()),
        }
    }

    #[test]
    fn generation_and_split_are_pure(seed in 0u64..1000, idx in 0usize..50) {
        let cfg = SynthConfig { image_size: 32, blob_radius: (3.0, 5.0), seed, ..Default::default() };
        let a = generate_one(idx, &cfg);
        let b = generate_one(idx, &cfg);
        prop_assert_eq!(&a.sample, &b.sample);
        let samples: Vec<_> = (0..10).map(|i| generate_one(i, &cfg).sample).collect();
        let s1 = split(&samples, [0.6, 0.2, 0.2], seed).unwrap();
        let s2 = split(&samples, [0.6, 0.2, 0.2], seed).unwrap();
        prop_assert_eq!(s1, s2);
    }
}

#[test]
fn distractors_are_class_irrelevant() {
    let cfg = SynthConfig { seed: 11, ..Default::default() };
    // per label: (count, intensity, ring fraction) summaries
    let mut stats = [[Vec::new(), Vec::new(), Vec::new()], [Vec::new(), Vec::new(), Vec::new()]];
    for i in 0..10_000 {
        let rec = generate_one(i, &cfg);
        let s = &mut stats[rec.sample.label];
        s[0].push(rec.distractors.len() as f64);
        for d in &rec.distractors {
            let (ring, intensity) = match *d {
                Distractor::Line { intensity, .. } => (0.0, intensity),
                Distractor::Ring { intensity, .. } => (1.0, intensity),
            };
            s[1].push(intensity);
            s[2].push(ring);
        }
    }
    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    for k in 0..3 {
        let (m0, s0) = mean_se(&stats[0][k]);
        let (m1, s1) = mean_se(&stats[1][k]);
        let z = (m0 - m1).abs() / (s0 * s0 + s1 * s1).sqrt();
        assert!(z < 4.0, "summary {k}: {m0} vs {m1} (z = {z})");
    }
}
