use hmap_core::rng::SplitMix64;
use hmap_nn::gradcheck::{check_param, relative_error};
use hmap_nn::{mse, Module, Param, Tensor};
use hmap_pipeline::model::*;

fn random<T: hmap_nn::Scalar>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| T::of(rng.uniform(lo, hi)))
}

fn image<T: hmap_nn::Scalar>(m: Modality, batch: usize, seed: u64) -> Tensor<T> {
    let (h, w) = m.input_hw();
    random(&[batch, 1, h, w], 0.1, 1.0, seed)
}

#[test]
fn shape_ledger() {
    let cfg = ModelConfig::default();
    let mut rng = SplitMix64::new(1);
    let depth = Encoder::<f32>::new("d", Modality::Depth, &cfg, &mut rng);
    assert_eq!(depth.spatial_trace(), &[(120, 160), (60, 80), (30, 40), (15, 20), (8, 10)]);
    assert_eq!(depth.flatten_size(), 10240);
    let lidar = Encoder::<f32>::new("l", Modality::Lidar, &cfg, &mut rng);
    assert_eq!(lidar.spatial_trace(), &[(40, 276), (20, 138), (10, 69), (5, 35), (3, 18)]);
    assert_eq!(lidar.flatten_size(), 6912);
    assert_eq!(cfg.output_len(), 165);
    assert_eq!(cfg.fusion_width(), 692);

    for m in Modality::ALL {
        let ae = Autoencoder::<f32>::new(m, &cfg);
        let x = image::<f32>(m, 2, 3);
        let z = ae.encoder.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 256]);
        assert_eq!(ae.reconstruct(&x).unwrap().shape(), x.shape());
    }
    let eds = EdsModel::<f32>::new(&cfg).unwrap();
    assert_eq!(eds.fusion.weight.value.shape(), &[256, 692]);
    let (y, h, _) = eds
        .step(Some(&image(Modality::Depth, 1, 4)), Some(&image(Modality::Lidar, 1, 5)), &Tensor::zeros(&[1, 15]), &eds.zero_prior(1), &eds.zero_hidden(1))
        .unwrap();
    assert_eq!(y.shape(), &[1, 165]);
    assert_eq!(h.len(), 2);
    assert!(h.iter().all(|t| t.shape() == [1, 256]));
}

#[test]
fn wrong_input_shapes_are_errors() {
    let cfg = ModelConfig::default();
    let eds = EdsModel::<f32>::new(&cfg).unwrap();
    let bad = Tensor::<f32>::zeros(&[1, 1, 40, 276]);
    assert!(eds.encoder(Modality::Depth).unwrap().encode(&bad).is_err());
    let s = Tensor::zeros(&[1, 14]);
    let r = eds.step(Some(&image(Modality::Depth, 1, 1)), Some(&image(Modality::Lidar, 1, 2)), &s, &eds.zero_prior(1), &eds.zero_hidden(1));
    assert!(r.is_err());
    let s = Tensor::zeros(&[1, 15]);
    assert!(eds.step(None, Some(&image(Modality::Lidar, 1, 2)), &s, &eds.zero_prior(1), &eds.zero_hidden(1)).is_err());
}

#[test]
fn autoencoder_output_is_a_function_of_the_latent() {
    let cfg = ModelConfig::default();
    for m in Modality::ALL {
        let ae = Autoencoder::<f32>::new(m, &cfg);
        let x = image::<f32>(m, 2, 9);
        let z = ae.encoder.encode(&x).unwrap();
        let (from_latent, _) = ae.decoder.forward(&z).unwrap();
        assert_eq!(from_latent, ae.reconstruct(&x).unwrap());
        // the decoder accepts nothing wider than the latent
        assert!(ae.decoder.forward(&Tensor::zeros(&[2, 257])).is_err());
    }
}

#[test]
fn construction_is_deterministic_and_modest() {
    for mode in ModalityMode::ALL {
        let cfg = ModelConfig { mode, ..ModelConfig::default() };
        let a = EdsModel::<f32>::new(&cfg).unwrap();
        let b = EdsModel::<f32>::new(&cfg).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.name == q.name && p.value == q.value));
        assert!(a.param_count() < 10_000_000, "{}", a.param_count());
    }
}

#[test]
fn modality_ablation_structure() {
    let names = |mode| {
        let m = EdsModel::<f32>::new(&ModelConfig { mode, ..ModelConfig::default() }).unwrap();
        (m.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>(), m.fusion.weight.value.shape().to_vec())
    };
    let (fused, w) = names(ModalityMode::Fused);
    assert!(fused.iter().any(|n| n.starts_with("depth_encoder")) && fused.iter().any(|n| n.starts_with("lidar_encoder")));
    assert!(!fused.iter().any(|n| n.ends_with("_missing")));
    assert_eq!(w, [256, 692]);
    let (depth_only, w) = names(ModalityMode::DepthOnly);
    assert!(!depth_only.iter().any(|n| n.starts_with("lidar_encoder")));
    assert!(depth_only.iter().any(|n| n == "lidar_missing"));
    assert_eq!(w, [256, 692]);
    let (lidar_only, _) = names(ModalityMode::LidarOnly);
    assert!(!lidar_only.iter().any(|n| n.starts_with("depth_encoder")));

    for mode in ModalityMode::ALL {
        let m = EdsModel::<f32>::new(&ModelConfig { mode, ..ModelConfig::default() }).unwrap();
        let missing = Modality::ALL.into_iter().find(|x| !mode.uses(*x));
        if let Some(x) = missing {
            let z = m.missing_latent(x, 1).unwrap();
            assert!(z.data().iter().any(|v| *v != 0.0), "stand-in latent must not be zero");
        }
        let (y, _, _) = m
            .step(Some(&image(Modality::Depth, 1, 1)), Some(&image(Modality::Lidar, 1, 2)), &Tensor::zeros(&[1, 15]), &m.zero_prior(1), &m.zero_hidden(1))
            .unwrap();
        assert_eq!(y.len(), 165);
    }
}

#[test]
fn step_is_repeatable_bit_for_bit() {
    let m = EdsModel::<f32>::new(&ModelConfig::default()).unwrap();
    let (d, l) = (image(Modality::Depth, 2, 1), image(Modality::Lidar, 2, 2));
    let s = random(&[2, 15], -1.0, 1.0, 3);
    let prev = random(&[2, 165], -0.2, 0.2, 4);
    let hidden = vec![random(&[2, 256], -0.5, 0.5, 5), random(&[2, 256], -0.5, 0.5, 6)];
    let a = m.step(Some(&d), Some(&l), &s, &prev, &hidden).unwrap();
    let b = m.step(Some(&d), Some(&l), &s, &prev, &hidden).unwrap();
    assert_eq!((a.0, a.1), (b.0, b.1));
}

/// Conv biases move many ReLU pre-activations at once; a 1e-5 step can push
/// one across zero, so the whole-model check uses a smaller step.
const MODEL_STEP: f64 = 1e-6;

fn param_getter<F: Fn(&mut EdsModel<f64>) -> &mut Param<f64>>(f: F) -> F {
    f
}

#[test]
fn full_model_gradcheck_f64() {
    let cfg = ModelConfig::default();
    let mut m = EdsModel::<f64>::new(&cfg).unwrap();
    let (d, l) = (image::<f64>(Modality::Depth, 2, 11), image::<f64>(Modality::Lidar, 2, 12));
    let s = random(&[2, 15], -1.0, 1.0, 13);
    let prev = random(&[2, 165], -0.2, 0.2, 14);
    let hidden = vec![random(&[2, 256], -0.5, 0.5, 15), random(&[2, 256], -0.5, 0.5, 16)];
    let target = random(&[2, 165], -0.3, 0.3, 17);

    let loss = |m: &EdsModel<f64>, s: &Tensor<f64>, prev: &Tensor<f64>| {
        let (y, _, _) = m.step(Some(&d), Some(&l), s, prev, &hidden).unwrap();
        mse(&y, &target).unwrap().0
    };
    let (y, _, cache) = m.step(Some(&d), Some(&l), &s, &prev, &hidden).unwrap();
    let (_, dy) = mse(&y, &target).unwrap();
    m.zero_grad();
    let zero_next = m.zero_hidden(2);
    let g = m.step_backward(&cache, &dy, &zero_next).unwrap();

    let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for (i, name) in names.iter().enumerate() {
        let get = param_getter(move |m| m.params_mut().into_iter().nth(i).unwrap());
        let e = check_param(&mut m, &get, &|m| loss(m, &s, &prev), 6, MODEL_STEP);
        assert!(e < 1e-3, "{name}: {e}");
        worst = worst.max(e);
    }
    for (input, grad, which) in [(&s, &g.state, 0), (&prev, &g.prev, 1)] {
        for i in [0, 7, input.len() - 1] {
            let mut p = input.clone();
            p.data_mut()[i] += MODEL_STEP;
            let fp = if which == 0 { loss(&m, &p, &prev) } else { loss(&m, &s, &p) };
            p.data_mut()[i] -= 2.0 * MODEL_STEP;
            let fm = if which == 0 { loss(&m, &p, &prev) } else { loss(&m, &s, &p) };
            let e = relative_error(grad.data()[i], (fp - fm) / (2.0 * MODEL_STEP));
            assert!(e < 1e-3, "input {which}[{i}]: {e}");
        }
    }
    println!("worst parameter relative error {worst:.2e}");
}

#[test]
fn gradient_reaches_step_zero_through_32_steps() {
    let cfg = ModelConfig::default();
    let mut m = EdsModel::<f32>::new(&cfg).unwrap();
    let steps = 32;
    let mut hidden = m.zero_hidden(1);
    let mut prev = m.zero_prior(1);
    let mut caches = Vec::new();
    let mut y = Tensor::zeros(&[1, 165]);
    for t in 0..steps {
        let s = random(&[1, 15], -1.0, 1.0, 100 + t);
        let (d, l) = (image(Modality::Depth, 1, 200 + t), image(Modality::Lidar, 1, 300 + t));
        let (out, h, c) = m.step(Some(&d), Some(&l), &s, &prev, &hidden).unwrap();
        caches.push(c);
        hidden = h;
        prev = out.clone();
        y = out;
    }
    // loss on the last step only, so anything reaching step 0 crossed 31 steps
    let (_, dy) = mse(&y, &Tensor::filled(&[1, 165], 0.1)).unwrap();
    m.zero_grad();
    let mut d_hidden = m.zero_hidden(1);
    let encoder_grad = |m: &mut EdsModel<f32>| -> Vec<f32> {
        m.encoder_params_mut().iter().flat_map(|p| p.grad.data().to_vec()).collect()
    };
    for (k, c) in caches.iter().enumerate().rev() {
        let d_out = if k == steps as usize - 1 { dy.clone() } else { Tensor::zeros(&[1, 165]) };
        let before = (k == 0).then(|| encoder_grad(&mut m));
        let g = m.step_backward(c, &d_out, &d_hidden).unwrap();
        if let Some(before) = before {
            assert!(g.state.sum_sq() > 0.0, "no gradient at the step-0 state");
            assert!(g.depth_latent.sum_sq() > 0.0 && g.lidar_latent.sum_sq() > 0.0);
            let after = encoder_grad(&mut m);
            assert!(before.iter().zip(&after).any(|(a, b)| a != b), "step 0 added nothing to the encoder gradients");
        }
        d_hidden = g.hidden;
    }
}
